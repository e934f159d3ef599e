"""Prompt-injection strategies on top of the tiny ViT.

``forward_vpt_shallow`` and ``forward_vpt_deep`` are written as direct,
stand-alone loops. ``forward_ship`` is the general engine: hierarchy-wise
prompts (fresh at each group entry, carried inside the group), shared prompts
appended at every layer and discarded afterwards, attribute prompts at the
entry of the last groups, and optional decoupled attention.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attributes import AttributePromptParams, PrototypeSet, attribute_prompt
from .autodiff import Tensor
from .hierarchy import HierarchyPartition
from .vit import (ConfigError, LayerActivations, LayerRecord, ViTModel, block_forward, classify, embed,
                  forward_plain, instance_only_cls_attention, topk_patch_tokens)

MODES = ("none", "vpt_shallow", "vpt_deep", "sip", "sip+ssp", "ship_full")


@dataclass
class PromptHyperparams:
    num_prompts: int = 50
    num_shared: int = 10
    threshold: float = 0.95
    lambda_d: float = 0.1
    lambda_m: float = 0.5
    lambda_a: float = 0.1
    num_attr_tokens: int = 10
    num_match_tokens: int = 10
    attr_hierarchies: int = 2
    num_prototypes: int = 200

    def __post_init__(self):
        for name in ("lambda_d", "lambda_m", "lambda_a"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not -1.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [-1, 1], got {self.threshold}")
        for name in ("num_prompts", "num_shared", "num_attr_tokens", "num_match_tokens", "attr_hierarchies"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.num_prototypes < 1:
            raise ConfigError("num_prototypes must be >= 1")


@dataclass
class StrategySpec:
    mode: str = "ship_full"
    partition: HierarchyPartition | None = None
    use_ap: bool = False
    use_pml: bool = False
    use_da: bool = False
    p2ip: str = "last"

    def __post_init__(self):
        if self.p2ip not in ("last", "all", "none"):
            raise ConfigError(f"unknown p2ip policy {self.p2ip!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "ship_full":
            self.use_ap = self.use_pml = self.use_da = True
        if self.mode == "none" and (self.use_ap or self.use_pml or self.use_da):
            raise ConfigError("mode 'none' takes no prompt components")
        if self.use_ap and not self.is_hierarchical:
            raise ConfigError("attribute prompts need a hierarchical mode (sip, sip+ssp, ship_full)")

    @property
    def is_hierarchical(self) -> bool:
        return self.mode in ("sip", "sip+ssp", "ship_full")

    @property
    def uses_ssp(self) -> bool:
        return self.mode in ("sip+ssp", "ship_full")

    def resolved_partition(self, num_layers: int) -> HierarchyPartition | None:
        if self.mode == "none":
            return None
        if self.mode == "vpt_shallow":
            return HierarchyPartition.single(num_layers)
        if self.mode == "vpt_deep":
            return HierarchyPartition.singletons(num_layers)
        if self.partition is None:
            raise ConfigError(f"mode {self.mode!r} needs a hierarchy partition")
        self.partition.validate(num_layers)
        return self.partition


def _uniform(rng, n, d):
    r = np.sqrt(6.0 / (d + n * d)) if n else 0.0
    return Tensor(rng.uniform(-r, r, size=(n, d)), requires_grad=True)


@dataclass
class PromptState:
    sip_pools: list[Tensor]
    ssp_pool: Tensor | None = None
    attr: AttributePromptParams | None = None
    hyper: PromptHyperparams = field(default_factory=PromptHyperparams)

    @classmethod
    def init(cls, spec: StrategySpec, embed_dim: int, num_layers: int,
             hyper: PromptHyperparams | None = None, seed: int = 0) -> "PromptState":
        hyper = hyper or PromptHyperparams()
        rng = np.random.default_rng(seed)
        part = spec.resolved_partition(num_layers)
        M = 0 if part is None else part.num_hierarchies
        if spec.use_ap and hyper.attr_hierarchies > M:
            raise ConfigError(f"attr_hierarchies={hyper.attr_hierarchies} exceeds hierarchy count M={M}")
        pools = [_uniform(rng, hyper.num_prompts, embed_dim) for _ in range(M)]
        ssp = _uniform(rng, hyper.num_shared, embed_dim) if spec.uses_ssp else None
        attr = None
        if spec.use_ap:
            attr = AttributePromptParams(_uniform(rng, hyper.num_attr_tokens, embed_dim), hyper.lambda_a,
                                         hyper.attr_hierarchies)
        return cls(pools, ssp, attr, hyper)

    def parameters(self) -> list[Tensor]:
        out = list(self.sip_pools)
        if self.ssp_pool is not None:
            out.append(self.ssp_pool)
        if self.attr is not None:
            out.append(self.attr.learnable)
        return out

    def num_trainable(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))


@dataclass
class ForwardResult:
    logits: Tensor
    acts: LayerActivations
    final_tokens: Tensor
    final_prompts: Tensor | None
    final_cls: np.ndarray


def _batched(pool: Tensor | None, b: int) -> Tensor | None:
    if pool is None or pool.shape[0] == 0:
        return None
    return ad.broadcast_to(pool, (b,) + pool.shape)


def _join(parts: list[Tensor | None]) -> Tensor | None:
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def _record(acts, z, v, cls, record):
    if record:
        acts.append(LayerRecord(z=z.data, v=None if v is None else v.data, cls_attn=cls, z_tensor=z, v_tensor=v))


# ---------------------------------------------------------------------------
# baselines written out directly


def forward_vpt_shallow(model: ViTModel, images: np.ndarray, prompts: Tensor, record: bool = True):
    """Prompts enter once before layer 0; their outputs feed the next layer."""
    if prompts.ndim != 2 or prompts.shape[1] != model.config.embed_dim:
        raise ad.DimensionError(f"prompts must be (N_p, {model.config.embed_dim}), got {prompts.shape}")
    z = embed(model, images)
    v = _batched(prompts, z.shape[0])
    acts = LayerActivations()
    for i in range(model.config.num_layers):
        z, v, cls = block_forward(model, i, z, v)
        _record(acts, z, v, cls, record)
    return classify(model, z), acts


def forward_vpt_deep(model: ViTModel, images: np.ndarray, pools: list[Tensor], record: bool = True):
    """A fresh pool enters every layer; the layer's prompt outputs are dropped."""
    n = model.config.num_layers
    if len(pools) != n:
        raise ConfigError(f"VPT-Deep needs one pool per layer ({n}), got {len(pools)}")
    z = embed(model, images)
    acts = LayerActivations()
    for i in range(n):
        z, v, cls = block_forward(model, i, z, _batched(pools[i], z.shape[0]))
        _record(acts, z, v, cls, record)
    return classify(model, z), acts


# ---------------------------------------------------------------------------
# general engine


@dataclass
class AttributeContext:
    params: AttributePromptParams
    prototypes: PrototypeSet

    def build(self, model: ViTModel, layer: int, z: Tensor) -> Tensor:
        """Attribute prompts from the tokens ``layer`` attends to most, given its input ``z``."""
        n_x = model.config.num_tokens
        cls_row = instance_only_cls_attention(model, layer, z)
        idx = topk_patch_tokens(cls_row, n_x, self.params.num_tokens) + 1
        tokens = ad.gather_tokens(z, idx)
        return attribute_prompt(tokens, self.prototypes, self.params)


def forward_ship(model: ViTModel, images: np.ndarray, partition: HierarchyPartition, sip_pools: list[Tensor], *,
                 ssp_pool: Tensor | list[Tensor] | None = None, attributes: AttributeContext | None = None,
                 decoupled: bool = False, lambda_d: float = 0.1, p2ip: str = "last",
                 record: bool = True) -> ForwardResult:
    """Hierarchical prompting.

    ``ssp_pool`` may be a list of per-layer tensors instead of one shared
    tensor (used to separate per-layer gradient contributions). ``p2ip`` is
    ``"last"`` (prompt branch of decoupled attention only at the final
    layer), ``"all"`` or ``"none"``.
    """
    cfg = model.config
    n_layers = cfg.num_layers
    partition.validate(n_layers)
    M = partition.num_hierarchies
    if len(sip_pools) != M:
        raise ConfigError(f"expected {M} SIP pools, got {len(sip_pools)}")
    if p2ip not in ("last", "all", "none"):
        raise ConfigError(f"unknown p2ip policy {p2ip!r}")
    if isinstance(ssp_pool, list) and len(ssp_pool) != n_layers:
        raise ConfigError("per-layer SSP list must have one entry per layer")
    ap_groups = set()
    if attributes is not None:
        m_a = attributes.params.num_hierarchies
        if m_a > M:
            raise ConfigError(f"attribute prompts on the last {m_a} hierarchies, but only M={M} exist")
        ap_groups = set(range(M - m_a, M))

    group_of = {i: k for k, g in enumerate(partition.groups) for i in g}
    starts = set(partition.starts)
    z = embed(model, images)
    b = z.shape[0]
    acts = LayerActivations()
    carried = None      # SIP (+ AP) prompts propagating inside the current group
    n_sip = 0
    v = None
    cls = None
    for i in range(n_layers):
        k = group_of[i]
        if i in starts:
            carried = _batched(sip_pools[k], b)
            n_sip = 0 if carried is None else carried.shape[1]
            if k in ap_groups:
                carried = _join([carried, attributes.build(model, i, z)])
        elif k in ap_groups and attributes.params.rebuild_per_layer:
            kept = None if n_sip == 0 else ad.slice_axis(carried, 0, n_sip, 1)
            carried = _join([kept, attributes.build(model, i, z)])
        shared_pool = ssp_pool[i] if isinstance(ssp_pool, list) else ssp_pool
        shared = _batched(shared_pool, b)
        n_carried = 0 if carried is None else carried.shape[1]
        prompts = _join([carried, shared])
        include = p2ip == "all" or (p2ip == "last" and i == n_layers - 1)
        z, v, cls = block_forward(model, i, z, prompts, decoupled=decoupled, lambda_d=lambda_d,
                                  include_p2ip=include)
        carried = ad.slice_axis(v, 0, n_carried, 1) if n_carried else None
        _record(acts, z, v, cls, record)
    return ForwardResult(classify(model, z), acts, z, v, cls)


def forward_sip(model: ViTModel, images: np.ndarray, partition: HierarchyPartition, sip_pools: list[Tensor],
                record: bool = True):
    res = forward_ship(model, images, partition, sip_pools, record=record)
    return res.logits, res.acts


def forward_ssp(model: ViTModel, images: np.ndarray, ssp_pool: Tensor, partition: HierarchyPartition,
                sip_pools: list[Tensor], record: bool = True):
    """Shared prompts on top of a hierarchical base strategy (VPT-Shallow/Deep via the trivial partitions)."""
    if ssp_pool.ndim != 2 or ssp_pool.shape[1] != model.config.embed_dim:
        raise ad.DimensionError(f"ssp_pool must be (N_SS, {model.config.embed_dim}), got {ssp_pool.shape}")
    res = forward_ship(model, images, partition, sip_pools, ssp_pool=ssp_pool, record=record)
    return res.logits, res.acts


def forward_strategy(model: ViTModel, images: np.ndarray, spec: StrategySpec, state: PromptState | None,
                     prototypes: PrototypeSet | None = None, record: bool = False) -> ForwardResult:
    """Dispatch a strategy spec to the engine."""
    if spec.mode == "none":
        logits, acts = forward_plain(model, images, record=True)
        last = acts[-1]
        return ForwardResult(logits, acts if record else LayerActivations(), last.z_tensor, None, last.cls_attn)
    part = spec.resolved_partition(model.config.num_layers)
    attrs = None
    if spec.use_ap:
        if prototypes is None or state.attr is None:
            raise ConfigError("attribute prompts need prototypes and attribute parameters")
        attrs = AttributeContext(state.attr, prototypes)
    return forward_ship(model, images, part, state.sip_pools, ssp_pool=state.ssp_pool, attributes=attrs,
                        decoupled=spec.use_da, lambda_d=state.hyper.lambda_d, p2ip=spec.p2ip, record=record)
