"""Experiment configuration: one JSON file fully determines a run."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import SyntheticTaskSpec
from .prompts import MODES, PromptHyperparams
from .training import TrainConfig
from .vit import ViTConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackboneSection(_Strict):
    num_layers: int = Field(8, ge=2)
    embed_dim: int = Field(64, ge=1)
    num_heads: int = Field(4, ge=1)
    patch_grid: int = Field(4, ge=1)
    patch_size: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    image_channels: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _heads(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        return self

    def to_vit(self, num_classes: int) -> ViTConfig:
        return ViTConfig(num_classes=num_classes, **self.model_dump())


class TaskSection(_Strict):
    num_classes: int = Field(10, ge=1)
    train_per_class: int = Field(100, ge=1)
    test_per_class: int = Field(50, ge=0)
    semantic_depth: float = Field(0.0, ge=0.0, le=1.0)
    signal: float = 1.0
    nuisance: float = 1.0
    noise: float = 0.5
    template_seed: int = 0

    def to_spec(self, backbone: BackboneSection) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(patch_grid=backbone.patch_grid, patch_size=backbone.patch_size,
                                 channels=backbone.image_channels, **self.model_dump())


class TrainSection(_Strict):
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    schedule: Literal["cosine"] = "cosine"

    def to_train(self, seed: int, lambda_m: float = 0.5, num_match_tokens: int = 10) -> TrainConfig:
        return TrainConfig(seed=seed, lambda_m=lambda_m, num_match_tokens=num_match_tokens, **self.model_dump())


class StrategySection(_Strict):
    mode: str = "ship_full"
    use_ap: bool = False
    use_pml: bool = False
    use_da: bool = False
    partition: Optional[list[list[int]]] = None

    @model_validator(mode="after")
    def _mode(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return self


class HierarchySection(_Strict):
    threshold: float = Field(0.95, ge=-1.0, le=1.0)
    rule: Literal["anchor", "consecutive"] = "anchor"
    sweep: list[float] = Field(default_factory=lambda: [1.0, 0.99, 0.98, 0.97, 0.96, 0.95, 0.9, 0.8, 0.5, -1.0])
    max_samples: int = Field(1024, ge=1)


class PromptSection(_Strict):
    num_prompts: int = Field(50, ge=0)
    num_shared: int = Field(10, ge=0)


class AttributeSection(_Strict):
    num_prototypes: int = Field(200, ge=1)
    attr_hierarchies: int = Field(2, ge=0)
    lambda_a: float = Field(0.1, ge=0.0, le=1.0)
    num_attr_tokens: int = Field(10, ge=0)
    temperature: float = Field(1.0, gt=0)
    rebuild_per_layer: bool = False
    max_samples: int = Field(1024, ge=1)
    kmeans_iters: int = Field(100, ge=1)


class DecoupledSection(_Strict):
    lambda_d: float = Field(0.1, ge=0.0, le=1.0)
    p2ip: Literal["last", "all", "none"] = "last"


class MatchingSection(_Strict):
    lambda_m: float = Field(0.5, ge=0.0, le=1.0)
    num_match_tokens: int = Field(10, ge=1)


class AblationSection(_Strict):
    component_grid: bool = True
    num_prototypes: list[int] = Field(default_factory=lambda: [20, 50, 100, 200])
    attr_hierarchies: list[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    num_match_tokens: list[int] = Field(default_factory=lambda: [5, 10, 20, 50])
    lambda_d: list[float] = Field(default_factory=lambda: [0.01, 0.1, 0.3, 0.5])
    workers: int = Field(1, ge=1)


class ExperimentConfig(_Strict):
    backbone: BackboneSection = Field(default_factory=BackboneSection)
    upstream_task: TaskSection = Field(default_factory=lambda: TaskSection(template_seed=0))
    downstream_task: TaskSection = Field(default_factory=lambda: TaskSection(template_seed=1))
    pretrain: TrainSection = Field(default_factory=lambda: TrainSection(epochs=30))
    train: TrainSection = Field(default_factory=TrainSection)
    strategy: StrategySection = Field(default_factory=StrategySection)
    hierarchy: HierarchySection = Field(default_factory=HierarchySection)
    prompts: PromptSection = Field(default_factory=PromptSection)
    attributes: AttributeSection = Field(default_factory=AttributeSection)
    decoupled: DecoupledSection = Field(default_factory=DecoupledSection)
    matching: MatchingSection = Field(default_factory=MatchingSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    seed: int = Field(0, ge=0)
    output_dir: str = "runs"
    checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _cross_checks(self):
        n = self.backbone.num_layers
        part = self.strategy.partition
        if part is not None:
            flat = [i for g in part for i in g]
            if any(not g for g in part) or flat != list(range(n)):
                raise ValueError(f"strategy.partition must cover layers 0..{n - 1} contiguously")
            if self.strategy.mode in ("ship_full",) or self.strategy.use_ap:
                if self.attributes.attr_hierarchies > len(part):
                    raise ValueError(f"attr_hierarchies={self.attributes.attr_hierarchies} > M={len(part)}")
        m = self.matching.num_match_tokens
        if m > self.backbone.patch_grid**2:
            raise ValueError("num_match_tokens exceeds the number of patch tokens")
        if self.attributes.num_attr_tokens > self.backbone.patch_grid**2:
            raise ValueError("num_attr_tokens exceeds the number of patch tokens")
        return self

    def hyperparams(self) -> PromptHyperparams:
        return PromptHyperparams(
            num_prompts=self.prompts.num_prompts, num_shared=self.prompts.num_shared,
            threshold=self.hierarchy.threshold, lambda_d=self.decoupled.lambda_d,
            lambda_m=self.matching.lambda_m, lambda_a=self.attributes.lambda_a,
            num_attr_tokens=self.attributes.num_attr_tokens, num_match_tokens=self.matching.num_match_tokens,
            attr_hierarchies=self.attributes.attr_hierarchies, num_prototypes=self.attributes.num_prototypes)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.model_validate(json.loads(Path(path).read_text()))


def config_schema() -> dict:
    return ExperimentConfig.model_json_schema()
