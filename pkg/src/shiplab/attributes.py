"""Attribute prototypes (k-means centroids) and sample-aware attribute prompts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class PrototypeSet:
    prototypes: np.ndarray
    source: dict = field(default_factory=dict)
    seed: int = 0
    inertia_history: list[float] = field(default_factory=list)
    labels: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def save(self, path: str | Path):
        from .data import write_tensors

        path = Path(path)
        write_tensors(path, [self.prototypes], meta={"kind": "prototypes"})
        side = {"K": self.k, "d": self.dim, "source": self.source, "seed": self.seed,
                "inertia_history": self.inertia_history}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeSet":
        from .data import read_tensors

        path = Path(path)
        side = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        (arr,), _ = read_tensors(path)
        if arr.shape != (side["K"], side["d"]):
            raise ValueError(f"prototype tensor {arr.shape} disagrees with sidecar K={side['K']}, d={side['d']}")
        return cls(arr, source=side["source"], seed=side["seed"], inertia_history=side["inertia_history"])


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x**2).sum(1)[:, None] - 2 * x @ c.T + (c**2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen]).min(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen centre; take the first unused index
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def kmeans(features: np.ndarray, k: int, max_iter: int = 100, seed: int = 0,
           source: dict | None = None, n_init: int = 10) -> PrototypeSet:
    """Lloyd's algorithm from k-means++ seeds, best of ``n_init`` restarts.

    Each restart stops when assignments no longer change or after ``max_iter``
    rounds. A cluster that empties is re-seeded with the point lying farthest
    from its own centroid (lowest index on ties). The restart with the lowest
    final inertia wins (earliest on ties); its per-iteration inertia is kept.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (n, d), got {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise ValueError("K must be >= 1")
    if n < k:
        raise ValueError(f"need at least K={k} samples, got {n}")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, history = _lloyd(x, kmeans_plus_plus(x, k, rng), k, max_iter)
        final = inertia(x, centers)
        if best is None or final < best[0]:
            best = (final, centers, history)
    _, centers, history = best
    labels = _sq_dists(x, centers).argmin(1)
    return PrototypeSet(centers, source=dict(source or {}), seed=seed, inertia_history=history, labels=labels)


def _lloyd(x, centers, k, max_iter):
    n = x.shape[0]
    history: list[float] = []
    labels = None
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new_labels = d.argmin(1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = _update_centers(x, labels, centers, k)
    return centers, history


def _update_centers(x, labels, centers, k):
    new = np.zeros_like(centers)
    counts = np.bincount(labels, minlength=k)
    np.add.at(new, labels, x)
    nonempty = counts > 0
    new[nonempty] /= counts[nonempty, None]
    if not nonempty.all():
        own = ((x - centers[labels]) ** 2).sum(1)
        order = np.argsort(-own, kind="stable")
        taken = set()
        for j in np.flatnonzero(~nonempty):
            p = next(int(i) for i in order if int(i) not in taken)
            taken.add(p)
            new[j] = x[p]
            labels[p] = j
    return new


def inertia(x: np.ndarray, centers: np.ndarray) -> float:
    return float(_sq_dists(np.asarray(x, float), np.asarray(centers, float)).min(1).sum())


# ---------------------------------------------------------------------------
# attribute prompts


@dataclass
class AttributePromptParams:
    """Learnable part ``L_a`` of the attribute prompts and how they are mixed and placed."""

    learnable: Tensor
    lambda_a: float = 0.1
    num_hierarchies: int = 2
    temperature: float = 1.0
    rebuild_per_layer: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda_a <= 1.0:
            raise ValueError(f"lambda_a must lie in [0, 1], got {self.lambda_a}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def num_tokens(self) -> int:
        return self.learnable.shape[0]


def aggregate_attributes(tokens: Tensor, prototypes: np.ndarray | Tensor, temperature: float = 1.0) -> Tensor:
    """Mix prototypes by softmax-normalised cosine similarity to each token.

    ``tokens`` is (..., n, d), ``prototypes`` (K, d). Row t of the result is
    ``sum_k w[t, k] * a_k`` with ``w[t]`` a probability vector.
    """
    a = prototypes if isinstance(prototypes, Tensor) else Tensor(prototypes)
    if tokens.shape[-1] != a.shape[-1]:
        raise ad.DimensionError(f"token dim {tokens.shape[-1]} != prototype dim {a.shape[-1]}")
    sims = ad.pairwise_cosine(tokens, a)
    w = ad.softmax(sims * (1.0 / temperature), axis=-1)
    return w @ a


def aggregation_weights(tokens: np.ndarray, prototypes: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    tn = tokens / np.linalg.norm(tokens, axis=-1, keepdims=True)
    an = prototypes / np.linalg.norm(prototypes, axis=-1, keepdims=True)
    s = tn @ an.T / temperature
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def attribute_prompt(tokens: Tensor, prototypes: PrototypeSet | np.ndarray, params: AttributePromptParams) -> Tensor:
    """``(1 - lambda_a) * L_a + lambda_a * AG(tokens, prototypes)``; prototypes stay frozen."""
    protos = prototypes.prototypes if isinstance(prototypes, PrototypeSet) else prototypes
    agg = aggregate_attributes(tokens, protos, params.temperature)
    return params.learnable * (1.0 - params.lambda_a) + agg * params.lambda_a
