"""Finite-difference checks of every differentiable path the method adds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attributes import AttributePromptParams, PrototypeSet, attribute_prompt
from .autodiff import Tensor, grad_check
from .hierarchy import HierarchyPartition
from .prompts import AttributeContext, forward_ship
from .training import combined_loss, match_tokens, pml
from .vit import ViTConfig, ViTModel, attention_decoupled

TINY = ViTConfig(num_layers=4, embed_dim=8, num_heads=2, patch_grid=2, patch_size=2, mlp_ratio=2,
                 image_channels=1, num_classes=3)


@dataclass
class ComponentResult:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def check_pml(seed=0, tol=1e-4) -> ComponentResult:
    rng = np.random.default_rng(seed)
    p, z = _leaf(rng, 4, 6), _leaf(rng, 6, 6)
    rep = grad_check(lambda: pml(p, z), [p, z], tol=tol)
    return ComponentResult("prompt matching loss", rep.max_error, tol)


def check_attribute_path(seed=0, tol=1e-4) -> ComponentResult:
    rng = np.random.default_rng(seed)
    la = _leaf(rng, 3, 5)
    tokens = _leaf(rng, 2, 3, 5)
    protos = rng.normal(size=(4, 5))
    weights = Tensor(rng.normal(size=(2, 3, 5)))
    params = AttributePromptParams(la, lambda_a=0.3)
    rep = grad_check(lambda: (attribute_prompt(tokens, protos, params) * weights).sum(), [la, tokens], tol=tol)
    return ComponentResult("attribute prompt aggregation", rep.max_error, tol)


def check_decoupled_attention(seed=0, tol=1e-4) -> ComponentResult:
    rng = np.random.default_rng(seed)
    model = ViTModel(TINY, seed=seed)
    blk = model.blocks[0]
    for t in blk.values():
        t.requires_grad = True
    hz, hp = _leaf(rng, 2, 4, 8), _leaf(rng, 2, 3, 8)
    wz, wp = Tensor(rng.normal(size=(2, 4, 8))), Tensor(rng.normal(size=(2, 3, 8)))

    def f():
        z, p, _ = attention_decoupled(blk, hz, hp, TINY.num_heads, 0.1, include_p2ip=True)
        return (z * wz).sum() + (p * wp).sum()

    leaves = [hz, hp, blk["qkv_w"], blk["proj_w"]]
    rep = grad_check(f, leaves, tol=tol)
    return ComponentResult("decoupled attention", rep.max_error, tol)


def tiny_ship_instance(seed=0):
    """Everything a full-method forward needs at a size where finite differences are cheap."""
    rng = np.random.default_rng(seed)
    model = ViTModel(TINY, seed=seed)
    model.freeze_backbone(True)
    model.reset_head(TINY.num_classes, seed=seed)
    model.set_trainable_head(True)
    images = rng.normal(size=(3, TINY.image_size, TINY.image_size, TINY.image_channels))
    labels = np.array([0, 2, 1])
    part = HierarchyPartition([[0, 1], [2, 3]])
    pools = [_leaf(rng, 2, 8, scale=0.5) for _ in range(2)]
    ssp = _leaf(rng, 2, 8, scale=0.5)
    attr = AttributePromptParams(_leaf(rng, 2, 8, scale=0.5), lambda_a=0.1, num_hierarchies=2)
    protos = PrototypeSet(rng.normal(size=(3, 8)))
    return model, images, labels, part, pools, ssp, attr, protos


def check_combined_loss(seed=0, tol=1e-4) -> ComponentResult:
    model, images, labels, part, pools, ssp, attr, protos = tiny_ship_instance(seed)
    ctx = AttributeContext(attr, protos)

    def f():
        res = forward_ship(model, images, part, pools, ssp_pool=ssp, attributes=ctx, decoupled=True,
                           lambda_d=0.1, record=False)
        tokens = match_tokens(res, TINY.num_tokens, 2)
        loss, _, _ = combined_loss(res.logits, labels, res.final_prompts, tokens, 0.5)
        return loss

    leaves = pools + [ssp, attr.learnable, model.head["w"], model.head["b"]]
    rep = grad_check(f, leaves, tol=tol)
    return ComponentResult("combined loss end-to-end", rep.max_error, tol)


CHECKS = (check_pml, check_attribute_path, check_decoupled_attention, check_combined_loss)


def run_suite(tol: float = 1e-4, seed: int = 0) -> list[ComponentResult]:
    return [check(seed=seed, tol=tol) for check in CHECKS]
