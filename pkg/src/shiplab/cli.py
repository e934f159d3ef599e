"""Command-line entry point.

Exit codes: 0 success, 1 validation / input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import ExperimentConfig, config_schema, load_config
from .vit import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--seed", type=int, help="overrides the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiplab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the toy backbone on the upstream synthetic task")
    _common(p)

    p = sub.add_parser("analyze", help="inter-layer affinity, threshold sweep and chosen partition")
    _common(p)
    p.add_argument("--checkpoint")

    p = sub.add_parser("tune", help="prompt-tune the frozen backbone under the configured strategy")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--partition", help="partition JSON written by `analyze`")

    p = sub.add_parser("ablate", help="component grid and hyperparameter sweeps")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--partition")

    p = sub.add_parser("gradcheck", help="finite-difference checks of all differentiable components")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("schema", help="print the config JSON schema")
    return parser


def _resolve(args) -> tuple[ExperimentConfig, Path, int]:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = Path(args.out or cfg.output_dir)
    return cfg, out, seed


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2))
        return EXIT_OK
    try:
        cfg, out, seed = _resolve(args)
        return COMMANDS[args.command](args, cfg, out, seed)
    except (ValidationError, ConfigError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def cmd_pretrain(args, cfg, out, seed) -> int:
    from .experiment import run_pretrain

    _, runlog = run_pretrain(cfg, out, seed)
    last = runlog.records[-1]
    print(f"upstream test acc {last.test_acc:.1f}% (chance {100.0 / cfg.upstream_task.num_classes:.1f}%); "
          f"checkpoint in {out}")
    return EXIT_OK


def cmd_analyze(args, cfg, out, seed) -> int:
    from .experiment import load_frozen, resolve_checkpoint, run_analyze

    model = load_frozen(resolve_checkpoint(cfg, out, args.checkpoint))
    res = run_analyze(cfg, model, out, seed)
    for e in res["sweep"]:
        print(f"lambda={e.threshold:+.3f}  M={e.M:2d}  {e.partition.groups}")
    print(f"chosen (lambda={cfg.hierarchy.threshold}): {res['partition'].groups}")
    return EXIT_OK


def cmd_tune(args, cfg, out, seed) -> int:
    from .experiment import load_frozen, resolve_checkpoint, resolve_partition, run_tune

    model = load_frozen(resolve_checkpoint(cfg, out, args.checkpoint))
    part = None
    if cfg.strategy.mode in ("sip", "sip+ssp", "ship_full"):
        part = resolve_partition(cfg, model, seed, args.partition)
    runlog = run_tune(cfg, model, out, seed, part)
    last = runlog.records[-1]
    print(f"{cfg.strategy.mode}: test acc {last.test_acc:.1f}%, test loss {last.test_loss:.4f}, "
          f"{runlog.num_trainable} trainable parameters")
    return EXIT_OK


def cmd_ablate(args, cfg, out, seed) -> int:
    from .experiment import load_frozen, resolve_checkpoint, resolve_partition, run_ablate

    ckpt = resolve_checkpoint(cfg, out, args.checkpoint)
    part = resolve_partition(cfg, load_frozen(ckpt), seed, args.partition)
    rows = run_ablate(cfg, ckpt, out, seed, part)
    for r in rows:
        acc = f"{r['test_acc']:.1f}" if r["status"] == "ok" else r["error"]
        print(f"{r['cell']:<24} {acc}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, out, seed) -> int:
    from .gradcheck import run_suite

    results = run_suite(tol=args.tol, seed=seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} max rel err {r.max_error:.3e} (tol {r.tol:.0e})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {"pretrain": cmd_pretrain, "analyze": cmd_analyze, "tune": cmd_tune, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


if __name__ == "__main__":
    sys.exit(main())
