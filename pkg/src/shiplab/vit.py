"""Tiny pre-LN Vision Transformer with hooks for prompt tokens.

Sequences are laid out as ``[CLS, patches..., prompts...]``; prompts carry no
positional embedding. Attention comes in two flavours: joint (vanilla)
attention over the whole sequence, and the decoupled form in which instance
tokens mix an instance-only and a prompt-only attention.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ViTConfig:
    num_layers: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    patch_grid: int = 4
    patch_size: int = 4
    mlp_ratio: int = 4
    image_channels: int = 3
    num_classes: int = 10
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 2:
            raise ConfigError("num_layers must be >= 2")
        if min(self.patch_grid, self.patch_size, self.mlp_ratio, self.image_channels, self.num_classes) < 1:
            raise ConfigError("sizes must be positive")

    @property
    def num_tokens(self) -> int:
        return self.patch_grid**2 + 1

    @property
    def image_size(self) -> int:
        return self.patch_grid * self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.image_channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class LayerRecord:
    """What one layer produced: instance features, prompt features and the head-averaged CLS attention row."""

    z: np.ndarray
    v: np.ndarray | None
    cls_attn: np.ndarray
    z_tensor: Tensor | None = None
    v_tensor: Tensor | None = None


@dataclass
class LayerActivations:
    layers: list[LayerRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> LayerRecord:
        return self.layers[i]

    def append(self, rec: LayerRecord):
        self.layers.append(rec)


BLOCK_KEYS = ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b",
              "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


class ViTModel:
    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        d, h = c.embed_dim, c.embed_dim * c.mlp_ratio

        def w(*shape, std=0.02):
            return Tensor(rng.normal(0.0, std, size=shape))

        self.embed = {
            "patch_w": w(c.patch_dim, d),
            "patch_b": Tensor(np.zeros(d)),
            "cls": w(1, d),
            "pos": w(c.num_tokens, d),
        }
        self.blocks = []
        for _ in range(c.num_layers):
            self.blocks.append({
                "ln1_g": Tensor(np.ones(d)), "ln1_b": Tensor(np.zeros(d)),
                "qkv_w": w(d, 3 * d), "qkv_b": Tensor(np.zeros(3 * d)),
                "proj_w": w(d, d), "proj_b": Tensor(np.zeros(d)),
                "ln2_g": Tensor(np.ones(d)), "ln2_b": Tensor(np.zeros(d)),
                "fc1_w": w(d, h), "fc1_b": Tensor(np.zeros(h)),
                "fc2_w": w(h, d), "fc2_b": Tensor(np.zeros(d)),
            })
        self.final_norm = {"g": Tensor(np.ones(d)), "b": Tensor(np.zeros(d))}
        self.head = {"w": w(d, c.num_classes), "b": Tensor(np.zeros(c.num_classes))}

    # -- parameter bookkeeping -------------------------------------------------

    def backbone_parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": blk[k] for k in BLOCK_KEYS})
        out.update({f"final_norm.{k}": v for k, v in self.final_norm.items()})
        return out

    def head_parameters(self) -> dict[str, Tensor]:
        return {f"head.{k}": v for k, v in self.head.items()}

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.backbone_parameters(), **self.head_parameters()}

    def freeze_backbone(self, frozen: bool = True):
        for t in self.backbone_parameters().values():
            t.requires_grad = not frozen
            t.zero_grad()

    def set_trainable_head(self, trainable: bool = True):
        for t in self.head.values():
            t.requires_grad = trainable

    def reset_head(self, num_classes: int, seed: int = 0, zero: bool = False):
        d = self.config.embed_dim
        if zero:
            wdata = np.zeros((d, num_classes))
        else:
            r = np.sqrt(6.0 / (d + num_classes))
            wdata = np.random.default_rng(seed).uniform(-r, r, size=(d, num_classes))
        self.head = {"w": Tensor(wdata), "b": Tensor(np.zeros(num_classes))}
        self.config = ViTConfig(**{**asdict(self.config), "num_classes": num_classes})

    def copy(self) -> "ViTModel":
        other = ViTModel.__new__(ViTModel)
        other.config = ViTConfig(**asdict(self.config))
        other.embed = {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.embed.items()}
        other.blocks = [{k: Tensor(v.data.copy(), v.requires_grad) for k, v in b.items()} for b in self.blocks]
        other.final_norm = {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.final_norm.items()}
        other.head = {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.head.items()}
        return other

    # -- persistence -------------------------------------------------------------

    def save(self, path: str | Path):
        """Write ``path`` (tensor file) plus ``path.json`` (config and parameter names)."""
        from .data import write_tensors

        path = Path(path)
        params = self.named_parameters()
        write_tensors(path, [t.data for t in params.values()], meta={"kind": "vit-checkpoint"})
        sidecar = {"config": asdict(self.config), "names": list(params)}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ViTModel":
        from .data import read_tensors

        path = Path(path)
        side = path.with_suffix(path.suffix + ".json")
        if not path.exists() or not side.exists():
            raise FileNotFoundError(f"checkpoint {path} (or its sidecar {side}) not found")
        sidecar = json.loads(side.read_text())
        model = cls(ViTConfig(**sidecar["config"]))
        arrays, _ = read_tensors(path)
        params = model.named_parameters()
        if list(params) != sidecar["names"] or len(arrays) != len(params):
            raise ValueError(f"checkpoint {path} does not match the model layout")
        for t, arr in zip(params.values(), arrays):
            if t.shape != arr.shape:
                raise ValueError(f"checkpoint tensor shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()
        return model


# ---------------------------------------------------------------------------
# building blocks


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """(B, H, W, C) images -> (B, patch_grid**2, patch_dim) row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    c = config
    expected = (c.image_size, c.image_size, c.image_channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ad.DimensionError(f"images must have shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {images.shape}")
    b = images.shape[0]
    g, p = c.patch_grid, c.patch_size
    x = images.reshape(b, g, p, g, p, c.image_channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, c.patch_dim)


def embed(model: ViTModel, images: np.ndarray) -> Tensor:
    """Instance tokens z_0 = [CLS, patches] + positional embedding, shape (B, N_x, d)."""
    e = model.embed
    patches = Tensor(patchify(images, model.config))
    tok = patches @ e["patch_w"] + e["patch_b"]
    b = patches.shape[0]
    cls = ad.broadcast_to(e["cls"], (b, 1, model.config.embed_dim))
    return ad.concat([cls, tok], axis=1) + e["pos"]


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _qkv(blk, h: Tensor, num_heads: int):
    d = h.shape[-1]
    qkv = h @ blk["qkv_w"] + blk["qkv_b"]
    q = _split_heads(ad.slice_axis(qkv, 0, d, -1), num_heads)
    k = _split_heads(ad.slice_axis(qkv, d, 2 * d, -1), num_heads)
    v = _split_heads(ad.slice_axis(qkv, 2 * d, 3 * d, -1), num_heads)
    return q, k, v


def _attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Per-head scaled dot-product attention. Returns (head outputs (B,H,Tq,hd), weights (B,H,Tq,Tk))."""
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(q.shape[-1]))
    w = ad.softmax(scores, axis=-1)
    return w @ v, w


def attention_vanilla(blk, h: Tensor, num_heads: int) -> tuple[Tensor, np.ndarray]:
    """Joint multi-head self-attention over the whole (already normalised) sequence.

    Returns the projected outputs and the head-averaged attention weights (B, T, T).
    """
    q, k, v = _qkv(blk, h, num_heads)
    out, w = _attend(q, k, v)
    return _merge_heads(out) @ blk["proj_w"] + blk["proj_b"], w.data.mean(axis=1)


def attention_decoupled(blk, h_z: Tensor, h_p: Tensor | None, num_heads: int, lambda_d: float,
                        include_p2ip: bool) -> tuple[Tensor, Tensor | None, np.ndarray]:
    """Decoupled attention on normalised instance tokens ``h_z`` and prompt tokens ``h_p``.

    Instance outputs are ``(1 - lambda_d) * I2I + lambda_d * I2P`` (mixed per head,
    before the output projection). Prompt outputs are the joint prompt-to-all
    attention when ``include_p2ip``, otherwise ``None`` (the caller bypasses
    the attention sublayer for prompts). With no prompt tokens the instance
    branch is plain I2I.
    """
    if not 0.0 <= lambda_d <= 1.0:
        raise ConfigError(f"lambda_d must lie in [0, 1], got {lambda_d}")
    n_z = h_z.shape[1]
    has_prompts = h_p is not None and h_p.shape[1] > 0
    h = ad.concat([h_z, h_p], axis=1) if has_prompts else h_z
    q, k, v = _qkv(blk, h, num_heads)
    q_z = ad.slice_axis(q, 0, n_z, 2)
    i2i, w_ii = _attend(q_z, ad.slice_axis(k, 0, n_z, 2), ad.slice_axis(v, 0, n_z, 2))
    if has_prompts:
        n = h.shape[1]
        i2p, _ = _attend(q_z, ad.slice_axis(k, n_z, n, 2), ad.slice_axis(v, n_z, n, 2))
        mixed = i2i * (1.0 - lambda_d) + i2p * lambda_d
    else:
        mixed = i2i
    z_out = _merge_heads(mixed) @ blk["proj_w"] + blk["proj_b"]
    p_out = None
    if has_prompts and include_p2ip:
        n = h.shape[1]
        p2ip, _ = _attend(ad.slice_axis(q, n_z, n, 2), k, v)
        p_out = _merge_heads(p2ip) @ blk["proj_w"] + blk["proj_b"]
    return z_out, p_out, w_ii.data.mean(axis=1)


def _mlp(blk, x: Tensor, eps: float) -> Tensor:
    h = ad.layer_norm(x, blk["ln2_g"], blk["ln2_b"], eps)
    return x + ad.gelu(h @ blk["fc1_w"] + blk["fc1_b"]) @ blk["fc2_w"] + blk["fc2_b"]


def block_forward(model: ViTModel, layer: int, z: Tensor, prompts: Tensor | None, *,
                  decoupled: bool = False, lambda_d: float = 0.1,
                  include_p2ip: bool = True) -> tuple[Tensor, Tensor | None, np.ndarray]:
    """One transformer layer on ``[z, prompts]``.

    Returns (instance outputs, prompt outputs or None, CLS attention row). The
    CLS row is head-averaged and post-softmax; for decoupled attention it is
    the I2I row (instance keys only).
    """
    blk = model.blocks[layer]
    cfg = model.config
    n_z = z.shape[1]
    n_p = 0 if prompts is None else prompts.shape[1]
    if not decoupled:
        x = ad.concat([z, prompts], axis=1) if n_p else z
        h = ad.layer_norm(x, blk["ln1_g"], blk["ln1_b"], cfg.ln_eps)
        a, w = attention_vanilla(blk, h, cfg.num_heads)
        x = _mlp(blk, x + a, cfg.ln_eps)
        if not n_p:
            return x, None, w[:, 0, :]
        return ad.slice_axis(x, 0, n_z, 1), ad.slice_axis(x, n_z, n_z + n_p, 1), w[:, 0, :]

    h_z = ad.layer_norm(z, blk["ln1_g"], blk["ln1_b"], cfg.ln_eps)
    h_p = ad.layer_norm(prompts, blk["ln1_g"], blk["ln1_b"], cfg.ln_eps) if n_p else None
    a_z, a_p, w = attention_decoupled(blk, h_z, h_p, cfg.num_heads, lambda_d, include_p2ip)
    z = z + a_z
    if not n_p:
        return _mlp(blk, z, cfg.ln_eps), None, w[:, 0, :]
    p = prompts + a_p if a_p is not None else prompts
    x = _mlp(blk, ad.concat([z, p], axis=1), cfg.ln_eps)
    return ad.slice_axis(x, 0, n_z, 1), ad.slice_axis(x, n_z, n_z + n_p, 1), w[:, 0, :]


def classify(model: ViTModel, z: Tensor) -> Tensor:
    """Final LayerNorm on the CLS token, then the linear head."""
    cls = ad.slice_axis(z, 0, 1, 1).reshape(z.shape[0], z.shape[2])
    h = ad.layer_norm(cls, model.final_norm["g"], model.final_norm["b"], model.config.ln_eps)
    return h @ model.head["w"] + model.head["b"]


def instance_only_cls_attention(model: ViTModel, layer: int, z: Tensor) -> np.ndarray:
    """Head-averaged CLS attention of ``layer`` over instance keys only, computed from its input ``z``.

    Used to pick high-response tokens before the layer runs (no gradient).
    """
    blk = {k: v.data for k, v in model.blocks[layer].items()}
    cfg = model.config
    x = z.data
    mu = x.mean(axis=-1, keepdims=True)
    h = (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + cfg.ln_eps)
    h = h * blk["ln1_g"] + blk["ln1_b"]
    d, nh = cfg.embed_dim, cfg.num_heads
    qkv = h @ blk["qkv_w"] + blk["qkv_b"]
    b, t, _ = x.shape
    q = qkv[:, :1, :d].reshape(b, 1, nh, d // nh).transpose(0, 2, 1, 3)
    k = qkv[:, :, d:2 * d].reshape(b, t, nh, d // nh).transpose(0, 2, 1, 3)
    scores = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(cfg.head_dim)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    w = e / e.sum(axis=-1, keepdims=True)
    return w.mean(axis=1)[:, 0, :]


def forward_plain(model: ViTModel, images: np.ndarray, record: bool = True) -> tuple[Tensor, LayerActivations]:
    z = embed(model, images)
    acts = LayerActivations()
    for i in range(model.config.num_layers):
        z, _, cls = block_forward(model, i, z, None)
        if record:
            acts.append(LayerRecord(z=z.data, v=None, cls_attn=cls, z_tensor=z))
    return classify(model, z), acts


def cls_attention_topk(cls_row: np.ndarray, n: int) -> np.ndarray:
    """Indices (into the patch tokens, CLS excluded) of the ``n`` largest CLS attention weights.

    ``cls_row`` is (N_x,) or (B, N_x) with key 0 the CLS token. Prompt keys
    must already be sliced off (see ``topk_patch_tokens``). Ties go to the
    lowest index.
    """
    row = np.atleast_2d(np.asarray(cls_row, dtype=np.float64))
    patches = row[:, 1:]
    if not 0 <= n <= patches.shape[1]:
        raise ValueError(f"n={n} out of range for {patches.shape[1]} patch tokens")
    # stable sort on the negated weights keeps lowest index first among ties
    order = np.argsort(-patches, axis=1, kind="stable")[:, :n]
    return order if np.ndim(cls_row) == 2 else order[0]


def topk_patch_tokens(cls_attn: np.ndarray, num_instance: int, n: int) -> np.ndarray:
    """Batched top-n patch indices from CLS rows that may include prompt keys."""
    return cls_attention_topk(np.atleast_2d(cls_attn)[:, :num_instance], n)
