"""End-to-end pipelines behind the CLI subcommands."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attributes import PrototypeSet, kmeans
from .config import ExperimentConfig
from .data import generate_task
from .hierarchy import (HierarchyPartition, affinity_matrix, greedy_partition, threshold_sweep, write_analysis)
from .prompts import PromptState, StrategySpec
from .training import RunLog, pretrain, train
from .vit import ConfigError, ViTModel, forward_plain

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"


def upstream_data(cfg: ExperimentConfig, seed: int):
    return generate_task(cfg.upstream_task.to_spec(cfg.backbone), seed)


def downstream_data(cfg: ExperimentConfig, seed: int):
    return generate_task(cfg.downstream_task.to_spec(cfg.backbone), seed)


def run_pretrain(cfg: ExperimentConfig, out_dir: Path, seed: int) -> tuple[ViTModel, RunLog]:
    train_set, test_set = upstream_data(cfg, seed)
    model = ViTModel(cfg.backbone.to_vit(cfg.upstream_task.num_classes), seed=seed)
    runlog = pretrain(model, train_set, test_set, cfg.pretrain.to_train(seed),
                      log=lambda r: log.info("pretrain epoch %d loss %.4f acc %.1f", r.epoch, r.train_loss, r.test_acc))
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save(out_dir / CHECKPOINT_NAME)
    runlog.write(out_dir, "pretrain")
    chance = 100.0 / cfg.upstream_task.num_classes
    metrics = {"upstream_test_acc": runlog.records[-1].test_acc, "chance": chance,
               "upstream_test_loss": runlog.records[-1].test_loss}
    (out_dir / "pretrain_metrics.json").write_text(json.dumps(metrics, indent=2))
    return model, runlog


def resolve_checkpoint(cfg: ExperimentConfig, out_dir: Path, explicit: str | None) -> Path:
    path = Path(explicit or cfg.checkpoint or out_dir / CHECKPOINT_NAME)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def load_frozen(path: Path) -> ViTModel:
    model = ViTModel.load(path)
    model.freeze_backbone(True)
    return model


def run_analyze(cfg: ExperimentConfig, model: ViTModel, out_dir: Path, seed: int) -> dict:
    (x_tr, _), _ = downstream_data(cfg, seed)
    with ad.no_grad():
        S = affinity_matrix(model, x_tr, max_samples=cfg.hierarchy.max_samples, seed=seed)
    S.validate()
    sweep = threshold_sweep(S, cfg.hierarchy.sweep, cfg.hierarchy.rule)
    chosen = greedy_partition(S, cfg.hierarchy.threshold, cfg.hierarchy.rule)
    write_analysis(out_dir, S, sweep, chosen)
    return {"S": S, "sweep": sweep, "partition": chosen}


def resolve_partition(cfg: ExperimentConfig, model: ViTModel, seed: int, partition_file: str | None):
    if cfg.strategy.partition is not None:
        return HierarchyPartition(cfg.strategy.partition, None, "manual")
    if partition_file is not None:
        return HierarchyPartition.from_json(json.loads(Path(partition_file).read_text()))
    (x_tr, _), _ = downstream_data(cfg, seed)
    with ad.no_grad():
        S = affinity_matrix(model, x_tr, max_samples=cfg.hierarchy.max_samples, seed=seed)
    return greedy_partition(S, cfg.hierarchy.threshold, cfg.hierarchy.rule)


def prototype_features(model: ViTModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Final-layer patch tokens of the frozen backbone, mean-pooled per image."""
    feats = []
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            _, acts = forward_plain(model, images[lo:lo + batch_size])
            feats.append(acts[-1].z[:, 1:, :].mean(axis=1))
    return np.concatenate(feats)


def build_prototypes(cfg: ExperimentConfig, model: ViTModel, images: np.ndarray, seed: int,
                     num_prototypes: int | None = None) -> PrototypeSet:
    k = num_prototypes or cfg.attributes.num_prototypes
    n = min(len(images), cfg.attributes.max_samples)
    idx = np.sort(np.random.default_rng(seed).choice(len(images), n, replace=False))
    feats = prototype_features(model, images[idx])
    source = {"layer": model.config.num_layers - 1, "pooling": "patch-mean", "samples": int(n),
              "token_features": "layer input (residual stream) at the attribute-prompt entry layer"}
    return kmeans(feats, k, max_iter=cfg.attributes.kmeans_iters, seed=seed, source=source)


def strategy_from_config(cfg: ExperimentConfig, partition: HierarchyPartition | None) -> StrategySpec:
    s = cfg.strategy
    spec = StrategySpec(mode=s.mode, partition=partition if s.mode in ("sip", "sip+ssp", "ship_full") else None,
                        use_ap=s.use_ap, use_pml=s.use_pml, use_da=s.use_da, p2ip=cfg.decoupled.p2ip)
    return spec


def run_tune(cfg: ExperimentConfig, model: ViTModel, out_dir: Path, seed: int,
             partition: HierarchyPartition | None = None, stem: str = "runlog") -> RunLog:
    model = model.copy()
    model.freeze_backbone(True)
    train_set, test_set = downstream_data(cfg, seed)
    spec = strategy_from_config(cfg, partition)
    if spec.is_hierarchical and spec.partition is None:
        raise ConfigError(f"mode {spec.mode!r} needs a partition")
    hyper = cfg.hyperparams()
    state = None
    if spec.mode != "none":
        state = PromptState.init(spec, model.config.embed_dim, model.config.num_layers, hyper, seed)
        if state.attr is not None:
            state.attr.temperature = cfg.attributes.temperature
            state.attr.rebuild_per_layer = cfg.attributes.rebuild_per_layer
    prototypes = None
    if spec.use_ap:
        prototypes = build_prototypes(cfg, model, train_set[0], seed)
        out_dir.mkdir(parents=True, exist_ok=True)
        prototypes.save(out_dir / f"{stem}.prototypes.bin")
    model.reset_head(cfg.downstream_task.num_classes, seed=seed)
    tc = cfg.train.to_train(seed, cfg.matching.lambda_m, cfg.matching.num_match_tokens)
    runlog = train(model, state, train_set, test_set, spec, tc, prototypes,
                   log=lambda r: log.info("%s epoch %d train %.4f test %.4f acc %.1f", spec.mode, r.epoch,
                                          r.train_loss, r.test_loss, r.test_acc))
    runlog.write(out_dir, stem)
    return runlog


# ---------------------------------------------------------------------------
# ablation grid

COMPONENT_ROWS = [
    ("vpt_deep", {"mode": "vpt_deep"}),
    ("sip", {"mode": "sip"}),
    ("sip+da", {"mode": "sip", "use_da": True}),
    ("sip+ssp+da", {"mode": "sip+ssp", "use_da": True}),
    ("sip+ssp+ap+da", {"mode": "sip+ssp", "use_ap": True, "use_da": True}),
    ("ship_full", {"mode": "ship_full"}),
]


def ablation_cells(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    """(cell name, config overrides) for the component grid and the hyperparameter sweeps."""
    cells = []
    if cfg.ablation.component_grid:
        cells += [(f"grid:{name}", {"strategy": {**{"use_ap": False, "use_pml": False, "use_da": False}, **s}})
                  for name, s in COMPONENT_ROWS]
    full = {"mode": "ship_full"}
    for k in cfg.ablation.num_prototypes:
        cells.append((f"K={k}", {"strategy": full, "attributes": {"num_prototypes": k}}))
    for m in cfg.ablation.attr_hierarchies:
        cells.append((f"M_a={m}", {"strategy": full, "attributes": {"attr_hierarchies": m}}))
    for n in cfg.ablation.num_match_tokens:
        cells.append((f"N_m={n}", {"strategy": full, "matching": {"num_match_tokens": n}}))
    for lam in cfg.ablation.lambda_d:
        cells.append((f"lambda_d={lam}", {"strategy": full, "decoupled": {"lambda_d": lam}}))
    return cells


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _run_cell(args):
    name, cfg_dict, ckpt, out_dir, seed, partition_json = args
    try:
        cfg = ExperimentConfig.model_validate(cfg_dict)
        model = load_frozen(Path(ckpt))
        part = HierarchyPartition.from_json(partition_json)
        safe = name.replace(":", "_").replace("=", "_").replace("+", "_")
        rl = run_tune(cfg, model, Path(out_dir) / "cells", seed, part, stem=safe)
        last = rl.records[-1]
        return {"cell": name, "status": "ok", "test_acc": last.test_acc, "test_loss": last.test_loss,
                "num_trainable": rl.num_trainable, "error": ""}
    except Exception as exc:  # recorded per cell; the grid keeps going
        return {"cell": name, "status": "failed", "test_acc": "", "test_loss": "", "num_trainable": "",
                "error": f"{type(exc).__name__}: {exc}"}


def run_ablate(cfg: ExperimentConfig, ckpt: Path, out_dir: Path, seed: int,
               partition: HierarchyPartition) -> list[dict]:
    base = cfg.model_dump()
    jobs = [(name, _merge(base, over), str(ckpt), str(out_dir), seed, partition.to_json())
            for name, over in ablation_cells(cfg)]
    if cfg.ablation.workers > 1:
        with ProcessPoolExecutor(cfg.ablation.workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["cell", "status", "test_acc", "test_loss", "num_trainable", "error"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
