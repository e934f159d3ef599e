"""Inter-layer affinity and threshold-greedy grouping of layers into semantic hierarchies."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DegenerateInputError
from .vit import ConfigError

RULES = ("anchor", "consecutive")


@dataclass
class AffinityMatrix:
    S: np.ndarray
    sample_count: int

    def validate(self, tol: float = 1e-9):
        S = self.S
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"affinity matrix must be square, got {S.shape}")
        if not np.allclose(S, S.T, atol=tol, rtol=0):
            raise ValueError("affinity matrix is not symmetric")
        if not np.allclose(np.diag(S), 1.0, atol=tol, rtol=0):
            raise ValueError("affinity diagonal is not 1")
        if S.min() < -1 - tol or S.max() > 1 + tol:
            raise ValueError("affinity entries outside [-1, 1]")

    def to_json(self) -> dict:
        return {"S": self.S.tolist(), "sample_count": self.sample_count, "num_layers": self.S.shape[0]}

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            for i in range(self.S.shape[0]):
                for j in range(self.S.shape[1]):
                    w.writerow([i, j, repr(float(self.S[i, j]))])


@dataclass
class HierarchyPartition:
    groups: list[list[int]]
    threshold: float | None = None
    rule: str = "anchor"

    @property
    def num_hierarchies(self) -> int:
        return len(self.groups)

    @property
    def starts(self) -> list[int]:
        return [g[0] for g in self.groups]

    def validate(self, num_layers: int):
        flat = [i for g in self.groups for i in g]
        if any(not g for g in self.groups):
            raise ValueError("empty hierarchy group")
        if flat != list(range(num_layers)):
            raise ValueError(f"partition {self.groups} does not cover layers 0..{num_layers - 1} contiguously in order")

    def to_json(self) -> dict:
        return {"groups": self.groups, "threshold": self.threshold, "rule": self.rule, "M": self.num_hierarchies}

    @classmethod
    def from_json(cls, obj: dict) -> "HierarchyPartition":
        return cls([list(map(int, g)) for g in obj["groups"]], obj.get("threshold"), obj.get("rule", "anchor"))

    @classmethod
    def single(cls, num_layers: int) -> "HierarchyPartition":
        return cls([list(range(num_layers))])

    @classmethod
    def singletons(cls, num_layers: int) -> "HierarchyPartition":
        return cls([[i] for i in range(num_layers)])


def layer_feature(z: np.ndarray) -> np.ndarray:
    """Mean of the patch tokens (CLS at index 0 excluded), L2-normalised.

    ``z`` is (N_x, d) or batched (B, N_x, d).
    """
    z = np.asarray(z, dtype=np.float64)
    pooled = z[..., 1:, :].mean(axis=-2)
    norm = np.linalg.norm(pooled, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateInputError("pooled layer feature has zero norm")
    return pooled / norm


def affinity_from_features(features: np.ndarray) -> AffinityMatrix:
    """Sample-averaged cosine similarity from unit features shaped (samples, layers, d)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] == 0:
        raise ValueError("need at least one sample of per-layer features")
    per_sample = np.einsum("sid,sjd->sij", f, f)
    # ordered reduction so the result does not depend on batching
    S = np.zeros(per_sample.shape[1:])
    for s in range(per_sample.shape[0]):
        S += per_sample[s]
    S /= per_sample.shape[0]
    return AffinityMatrix(S, f.shape[0])


def collect_layer_features(model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    from .vit import forward_plain

    feats = []
    for lo in range(0, len(images), batch_size):
        _, acts = forward_plain(model, images[lo:lo + batch_size])
        feats.append(np.stack([layer_feature(rec.z) for rec in acts.layers], axis=1))
    return np.concatenate(feats, axis=0)


def affinity_matrix(model, samples: np.ndarray, max_samples: int = 1024, seed: int = 0,
                    batch_size: int = 128) -> AffinityMatrix:
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("affinity_matrix needs at least one sample")
    if len(samples) > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(samples), max_samples, replace=False))
        samples = samples[idx]
    return affinity_from_features(collect_layer_features(model, samples, batch_size))


def _check_threshold(lam: float):
    if not -1.0 <= lam <= 1.0:
        raise ConfigError(f"threshold must lie in [-1, 1], got {lam}")


def greedy_partition(S: AffinityMatrix | np.ndarray, lam: float = 0.95, rule: str = "anchor") -> HierarchyPartition:
    """Grow each group from its first (anchor) layer while affinity stays >= ``lam``.

    ``rule="anchor"`` compares layer j against the group's anchor,
    ``rule="consecutive"`` against layer j - 1. The first failing layer
    becomes the next anchor.
    """
    _check_threshold(lam)
    if rule not in RULES:
        raise ConfigError(f"unknown rule {rule!r}, expected one of {RULES}")
    M = S.S if isinstance(S, AffinityMatrix) else np.asarray(S, dtype=np.float64)
    n = M.shape[0]
    groups = []
    i = 0
    while i < n:
        a = 1
        while i + a < n:
            ref = i if rule == "anchor" else i + a - 1
            if M[ref, i + a] >= lam:
                a += 1
            else:
                break
        groups.append(list(range(i, i + a)))
        i += a
    return HierarchyPartition(groups, lam, rule)


@dataclass
class SweepEntry:
    threshold: float
    partition: HierarchyPartition
    alternative: HierarchyPartition = field(default=None)

    @property
    def M(self) -> int:
        return self.partition.num_hierarchies


def threshold_sweep(S: AffinityMatrix | np.ndarray, thresholds, rule: str = "anchor") -> list[SweepEntry]:
    """Partition at each threshold; the other rule's partition rides along for comparison."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ConfigError("threshold list is empty")
    other = "consecutive" if rule == "anchor" else "anchor"
    return [SweepEntry(lam, greedy_partition(S, lam, rule), greedy_partition(S, lam, other)) for lam in thresholds]


def write_analysis(out_dir: str | Path, S: AffinityMatrix, sweep: list[SweepEntry], chosen: HierarchyPartition):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "affinity.json").write_text(json.dumps(S.to_json(), indent=2))
    S.write_csv(out / "affinity.csv")
    rows = [{"threshold": e.threshold, "M": e.M, "groups": e.partition.groups, "rule": e.partition.rule,
             "alternative_rule": e.alternative.rule, "alternative_groups": e.alternative.groups,
             "alternative_M": e.alternative.num_hierarchies} for e in sweep]
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    (out / "partition.json").write_text(json.dumps(chosen.to_json(), indent=2))
