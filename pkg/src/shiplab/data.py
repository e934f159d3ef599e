"""Synthetic image tasks and the binary tensor file format.

Tensor file layout (all integers little-endian)::

    magic      8 bytes  b"SHIPTNSR"
    version    u32      1
    count      u32      number of tensors (layers, for activation dumps)
    meta_len   u32      length of the UTF-8 JSON metadata block
    meta       bytes
    count x { rank u32, dims u64 * rank, values f64 * prod(dims) }

Nothing may follow the last tensor.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SHIPTNSR"
VERSION = 1


class DumpFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DumpValidationError(ValueError):
    pass


def encode_tensors(arrays, meta: dict | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<III", VERSION, len(arrays), len(meta_bytes)), meta_bytes]
    for a in arrays:
        a = np.asarray(a, dtype="<f8")  # tobytes() is C-order; ascontiguousarray would promote 0-d
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> tuple[list[np.ndarray], dict]:
    pos = 0

    def need(n, what):
        if pos + n > len(buf):
            raise DumpFormatError(f"truncated while reading {what}: need {n} bytes, {len(buf) - pos} left", pos)

    need(len(MAGIC), "magic")
    if buf[:len(MAGIC)] != MAGIC:
        raise DumpFormatError(f"bad magic {buf[:len(MAGIC)]!r}", 0)
    pos = len(MAGIC)
    need(12, "header")
    version, count, meta_len = struct.unpack_from("<III", buf, pos)
    if version != VERSION:
        raise DumpFormatError(f"unsupported version {version}", pos)
    pos += 12
    need(meta_len, "metadata")
    try:
        meta = json.loads(buf[pos:pos + meta_len].decode()) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DumpFormatError(f"metadata is not valid JSON: {exc}", pos) from exc
    pos += meta_len
    arrays = []
    for i in range(count):
        need(4, f"rank of tensor {i}")
        (rank,) = struct.unpack_from("<I", buf, pos)
        if rank > 32:
            raise DumpFormatError(f"implausible rank {rank} for tensor {i}", pos)
        pos += 4
        need(8 * rank, f"dims of tensor {i}")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = math.prod(dims)  # Python ints: a hostile header cannot overflow this
        need(8 * n, f"values of tensor {i}")
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims))
        pos += 8 * n
    if pos != len(buf):
        raise DumpFormatError(f"{len(buf) - pos} trailing bytes after {count} declared tensors", pos)
    return arrays, meta


def write_tensors(path: str | Path, arrays, meta: dict | None = None):
    Path(path).write_bytes(encode_tensors(arrays, meta))


def read_tensors(path: str | Path) -> tuple[list[np.ndarray], dict]:
    return decode_tensors(Path(path).read_bytes())


@dataclass
class ActivationDump:
    layers: list[np.ndarray]
    meta: dict = field(default_factory=dict)

    def validate(self):
        if not self.layers:
            raise DumpValidationError("dump has no layers")
        dims = {a.shape[-1] for a in self.layers}
        if len(dims) != 1:
            raise DumpValidationError(f"inconsistent feature dims across layers: {sorted(dims)}")
        declared = self.meta.get("num_layers")
        if declared is not None and declared != len(self.layers):
            raise DumpValidationError(f"metadata declares {declared} layers, file holds {len(self.layers)}")
        if "d" in self.meta and self.meta["d"] != dims.pop():
            raise DumpValidationError("metadata d disagrees with tensor shapes")


def write_dump(path: str | Path, dump: ActivationDump):
    dump.validate()
    write_tensors(path, dump.layers, dump.meta)


def read_dump(path: str | Path) -> ActivationDump:
    arrays, meta = read_tensors(path)
    dump = ActivationDump(arrays, meta)
    dump.validate()
    return dump


def dump_from_model(model, images: np.ndarray, model_id: str = "toy-vit") -> ActivationDump:
    """Per-layer instance features (B, N_x, d) of the plain forward pass."""
    from .vit import forward_plain
    from . import autodiff as ad

    with ad.no_grad():
        _, acts = forward_plain(model, images)
    layers = [rec.z.copy() for rec in acts.layers]
    return ActivationDump(layers, {"model_id": model_id, "num_layers": len(layers), "d": int(layers[0].shape[-1])})


def dump_layer_features(dump: ActivationDump) -> np.ndarray:
    """(samples, layers, d) unit features from a dump of (B, N_x, d) layers."""
    from .hierarchy import layer_feature

    return np.stack([layer_feature(a) for a in dump.layers], axis=1)


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass
class SyntheticTaskSpec:
    """Class-conditioned images on the ViT patch grid.

    Each class owns a coarse layout (one colour per patch) and a fine texture
    (one pixel pattern tiled into every patch). ``semantic_depth`` moves class
    evidence from layout (0) to texture (1). Every sample also gets its own
    random layout and texture as nuisance plus pixel noise.
    """

    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 50
    patch_grid: int = 4
    patch_size: int = 4
    channels: int = 3
    semantic_depth: float = 0.0
    signal: float = 1.0
    nuisance: float = 1.0
    noise: float = 0.5
    template_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ValueError("need at least one training sample per class")
        if not 0.0 <= self.semantic_depth <= 1.0:
            raise ValueError("semantic_depth must lie in [0, 1]")

    @property
    def image_size(self) -> int:
        return self.patch_grid * self.patch_size


def _layout(rng, n, grid, p, ch):
    coarse = rng.normal(size=(n, grid, grid, ch))
    return np.repeat(np.repeat(coarse, p, axis=1), p, axis=2)


def _texture(rng, n, grid, p, ch):
    tex = rng.normal(size=(n, p, p, ch))
    tex -= tex.mean(axis=(1, 2), keepdims=True)
    return np.tile(tex, (1, grid, grid, 1))


def generate_task(spec: SyntheticTaskSpec, seed: int = 0):
    """Return ``((x_train, y_train), (x_test, y_test))``; images are (n, H, W, C) float64."""
    g, p, ch = spec.patch_grid, spec.patch_size, spec.channels
    trng = np.random.default_rng(spec.template_seed)
    class_layout = _layout(trng, spec.num_classes, g, p, ch)
    class_texture = _texture(trng, spec.num_classes, g, p, ch) * 2.0

    per_class = spec.train_per_class + spec.test_per_class
    n = spec.num_classes * per_class
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    evidence = (1.0 - spec.semantic_depth) * class_layout[labels] + spec.semantic_depth * class_texture[labels]
    x = (spec.signal * evidence
         + spec.nuisance * (_layout(rng, n, g, p, ch) + _texture(rng, n, g, p, ch)) * 0.5
         + spec.noise * rng.normal(size=(n, g * p, g * p, ch)))
    # disjoint split by index: the first train_per_class of every class train, the rest test
    within = np.tile(np.arange(per_class), spec.num_classes)
    is_train = within < spec.train_per_class
    order = rng.permutation(int(is_train.sum()))
    tr_x, tr_y = x[is_train][order], labels[is_train][order]
    return (tr_x, tr_y), (x[~is_train], labels[~is_train])


def linear_probe_accuracy(train_x, train_y, test_x, test_y, num_classes: int, ridge: float = 1.0) -> float:
    """Ridge-regression one-vs-all probe on flattened features; accuracy in percent."""
    a = np.asarray(train_x, float).reshape(len(train_x), -1)
    b = np.asarray(test_x, float).reshape(len(test_x), -1)
    mu, sd = a.mean(0), a.std(0) + 1e-12
    a, b = (a - mu) / sd, (b - mu) / sd
    a = np.hstack([a, np.ones((len(a), 1))])
    b = np.hstack([b, np.ones((len(b), 1))])
    y = np.eye(num_classes)[np.asarray(train_y)]
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ y)
    return 100.0 * float(((b @ w).argmax(1) == np.asarray(test_y)).mean())


def export_dataset(out_dir: str | Path, images: np.ndarray, labels: np.ndarray, stem: str = "dataset"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensors(out / f"{stem}.bin", [images], {"kind": "images", "count": int(len(images))})
    with open(out / f"{stem}_labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label"])
        for i, y in enumerate(labels):
            w.writerow([i, int(y)])
