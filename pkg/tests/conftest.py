import time

import pytest

_GATE: list[str] = []


class Gate:
    """Times one acceptance criterion and records a PASS/FAIL line for the terminal summary."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.t0 = time.perf_counter()

    def finish(self, ok: bool, detail: str):
        elapsed = time.perf_counter() - self.t0
        in_time = elapsed < self.limit_s
        verdict = "PASS" if ok and in_time else "FAIL"
        line = (f"{verdict} criterion {self.number} ({self.title}): {detail}; "
                f"{elapsed:.1f}s of {self.limit_s:.0f}s")
        _GATE.append(line)
        print(line)
        return ok and in_time, line


@pytest.fixture
def gate():
    return Gate


def pytest_terminal_summary(terminalreporter):
    if _GATE:
        terminalreporter.section("acceptance")
        for line in sorted(_GATE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
