"""Losses, AdamW with cosine decay, and the prompt-tuning / pretraining loops."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attributes import PrototypeSet
from .autodiff import Tensor
from .prompts import ForwardResult, PromptState, StrategySpec, forward_strategy
from .vit import ConfigError, ViTModel, forward_plain, topk_patch_tokens


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ad.DimensionError(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take_along(logp, labels[:, None], axis=1)
    return -picked.mean()


def pml(prompts: Tensor, tokens: Tensor) -> Tensor:
    """Mean over prompts of the cosine distance to the nearest selected token.

    Accepts (N_p, d) / (N_m, d) or batched (B, N_p, d) / (B, N_m, d); batches are averaged.
    Ties in the nearest token go to the lowest index.
    """
    if prompts.shape[0] == 0 or tokens.shape[-2] == 0 or prompts.shape[-2] == 0:
        raise ad.DegenerateInputError("prompt matching needs at least one prompt and one token")
    dist = 1.0 - ad.pairwise_cosine(prompts, tokens)
    nearest = np.argmin(dist.data, axis=-1)[..., None]
    return ad.take_along(dist, nearest, axis=-1).mean()


def combined_loss(logits: Tensor, labels: np.ndarray, prompts_last: Tensor | None, tokens_last: Tensor | None,
                  lambda_m: float) -> tuple[Tensor, Tensor, Tensor | None]:
    """``L_c + lambda_m * L_m``; returns (total, classification part, matching part or None)."""
    lc = cross_entropy(logits, labels)
    if lambda_m == 0 or prompts_last is None or tokens_last is None:
        return lc, lc, None
    lm = pml(prompts_last, tokens_last)
    return lc + lm * lambda_m, lc, lm


def match_tokens(res: ForwardResult, num_instance: int, n: int) -> Tensor:
    """The ``n`` final-layer patch tokens with highest CLS attention."""
    idx = topk_patch_tokens(res.final_cls, num_instance, n) + 1
    return ad.gather_tokens(res.final_tokens, idx)


# ---------------------------------------------------------------------------
# optimiser


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> list[np.ndarray]:
    """One decoupled-weight-decay Adam update at learning rate ``lr``; returns new parameter arrays."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; step aborted")
    b1, b2 = betas
    state.t += 1
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ad.DimensionError(f"param {p.shape} and grad {g.shape} disagree")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1**state.t)
        vhat = state.v[i] / (1 - b2**state.t)
        out.append(p - lr * weight_decay * p - lr * mhat / (np.sqrt(vhat) + eps))
    return out


class AdamW:
    def __init__(self, params: list[Tensor], lr: float, weight_decay: float, total_steps: int):
        self.params = params
        self.base_lr = lr
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.state = AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])
        self.step_count = 0

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.step_count, self.total_steps)

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        new = adamw_step([p.data for p in self.params], grads, self.state, self.lr, self.weight_decay)
        for p, arr in zip(self.params, new):
            p.data = arr
        self.step_count += 1

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lambda_m: float = 0.5
    num_match_tokens: int = 10
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("epochs, batch_size and lr must be positive, weight_decay non-negative")
        if self.lambda_m < 0:
            raise ConfigError("lambda_m must be >= 0")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    test_acc: float
    train_pml: float = 0.0
    wall_time: float = 0.0


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    num_trainable: int = 0
    strategy: str = ""

    def comparable(self) -> list[tuple]:
        """Everything except wall-clock time, for determinism checks."""
        return [(r.epoch, r.train_loss, r.test_loss, r.test_acc, r.train_pml) for r in self.records]

    def write(self, out_dir: str | Path, stem: str = "runlog"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_loss", "test_acc"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.test_loss), repr(r.test_acc)])
        last = self.records[-1] if self.records else None
        summary = {
            "strategy": self.strategy,
            "num_trainable": self.num_trainable,
            "epochs": len(self.records),
            "final_test_acc": None if last is None else last.test_acc,
            "final_test_loss": None if last is None else last.test_loss,
            "final_train_loss": None if last is None else last.train_loss,
            "train_pml": [r.train_pml for r in self.records],
        }
        (out / f"{stem}.json").write_text(json.dumps(summary, indent=2))
        # wall time varies run to run, so it lives outside the reproducible files
        (out / f"{stem}.timing.json").write_text(json.dumps([r.wall_time for r in self.records]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def evaluate(model: ViTModel, images: np.ndarray, labels: np.ndarray, spec: StrategySpec,
             state: PromptState | None, prototypes: PrototypeSet | None = None,
             batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy (percent)."""
    total_loss, correct = 0.0, 0
    with ad.no_grad():
        for lo in range(0, len(images), batch_size):
            x, y = images[lo:lo + batch_size], labels[lo:lo + batch_size]
            res = forward_strategy(model, x, spec, state, prototypes)
            total_loss += float(cross_entropy(res.logits, y).data) * len(y)
            correct += int((res.logits.data.argmax(1) == y).sum())
    return total_loss / len(images), 100.0 * correct / len(images)


def train(model: ViTModel, state: PromptState | None, train_set, test_set, spec: StrategySpec,
          config: TrainConfig, prototypes: PrototypeSet | None = None, log=None) -> RunLog:
    """Tune prompts and the head on a frozen backbone.

    ``train_set`` / ``test_set`` are ``(images, labels)`` pairs. Data order and
    everything else derive from ``config.seed``.
    """
    x_tr, y_tr = train_set
    x_te, y_te = test_set
    if len(x_tr) == 0:
        raise ValueError("empty training set")
    if any(t.requires_grad for t in model.backbone_parameters().values()):
        raise ConfigError("backbone must be frozen for prompt tuning")
    model.set_trainable_head(True)
    params = list(model.head.values()) + ([] if state is None else state.parameters())
    steps_per_epoch = math.ceil(len(x_tr) / config.batch_size)
    opt = AdamW(params, config.lr, config.weight_decay, config.epochs * steps_per_epoch)
    rng = np.random.default_rng(config.seed)
    use_pml = spec.use_pml and config.lambda_m > 0
    n_x = model.config.num_tokens
    runlog = RunLog(num_trainable=sum(int(p.data.size) for p in params), strategy=spec.mode)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses, pmls = [], []
        for idx in _batches(len(x_tr), config.batch_size, rng):
            opt.zero_grad()
            res = forward_strategy(model, x_tr[idx], spec, state, prototypes)
            tokens = match_tokens(res, n_x, config.num_match_tokens) if use_pml else None
            loss, _, lm = combined_loss(res.logits, y_tr[idx], res.final_prompts if use_pml else None, tokens,
                                        config.lambda_m if use_pml else 0.0)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
            pmls.append(0.0 if lm is None else float(lm.data))
        test_loss, test_acc = evaluate(model, x_te, y_te, spec, state, prototypes)
        rec = EpochRecord(epoch, float(np.mean(losses)), test_loss, test_acc, float(np.mean(pmls)),
                          time.perf_counter() - t0)
        runlog.records.append(rec)
        if log is not None:
            log(rec)
    opt.zero_grad()
    return runlog


def pretrain(model: ViTModel, train_set, test_set, config: TrainConfig, log=None) -> RunLog:
    """Full training of backbone and head on the upstream task."""
    x_tr, y_tr = train_set
    x_te, y_te = test_set
    if len(x_tr) == 0:
        raise ValueError("empty training set")
    model.freeze_backbone(False)
    model.set_trainable_head(True)
    params = list(model.named_parameters().values())
    steps_per_epoch = math.ceil(len(x_tr) / config.batch_size)
    opt = AdamW(params, config.lr, config.weight_decay, config.epochs * steps_per_epoch)
    rng = np.random.default_rng(config.seed)
    spec = StrategySpec(mode="none")
    runlog = RunLog(num_trainable=sum(int(p.data.size) for p in params), strategy="pretrain")
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(x_tr), config.batch_size, rng):
            opt.zero_grad()
            logits, _ = forward_plain(model, x_tr[idx], record=False)
            loss = cross_entropy(logits, y_tr[idx])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        test_loss, test_acc = evaluate(model, x_te, y_te, spec, None)
        runlog.records.append(EpochRecord(epoch, float(np.mean(losses)), test_loss, test_acc, 0.0,
                                          time.perf_counter() - t0))
        if log is not None:
            log(runlog.records[-1])
    opt.zero_grad()
    model.freeze_backbone(True)
    return runlog

