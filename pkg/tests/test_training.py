import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import pml_reference
from shiplab.attributes import PrototypeSet
from shiplab.autodiff import DegenerateInputError, Tensor
from shiplab.hierarchy import HierarchyPartition
from shiplab.prompts import PromptHyperparams, PromptState, StrategySpec
from shiplab.training import (AdamState, AdamW, RunLog, TrainConfig, adamw_step, combined_loss, cosine_lr,
                              cross_entropy, pml, pretrain, train)
from shiplab.vit import ConfigError, ViTConfig, ViTModel

TINY = ViTConfig(num_layers=4, embed_dim=8, num_heads=2, patch_grid=2, patch_size=2, mlp_ratio=2,
                 image_channels=1, num_classes=3)


# prompt matching loss --------------------------------------------------------------


def test_pml_zero_when_prompts_equal_tokens():
    p = np.random.default_rng(0).normal(size=(4, 6))
    assert float(pml(Tensor(p), Tensor(p.copy())).data) == pytest.approx(0.0, abs=1e-12)


def test_pml_one_when_orthogonal():
    eye = np.eye(4)
    assert float(pml(Tensor(eye[:2]), Tensor(eye[2:])).data) == pytest.approx(1.0, abs=1e-12)


def test_pml_two_when_antipodal():
    p = np.array([[1.0, 0.0]])
    assert float(pml(Tensor(p), Tensor(-p)).data) == pytest.approx(2.0, abs=1e-12)


def test_pml_picks_nearest_token():
    p = np.array([[1.0, 0.0]])
    t = np.array([[0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]])
    assert float(pml(Tensor(p), Tensor(t)).data) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)


def test_pml_matches_loop_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p, t = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        assert float(pml(Tensor(p), Tensor(t)).data) == pytest.approx(pml_reference(p, t), abs=1e-12)


def test_pml_batched_is_mean_of_per_sample():
    rng = np.random.default_rng(2)
    p, t = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 2, 5))
    per = [pml_reference(p[b], t[b]) for b in range(3)]
    assert float(pml(Tensor(p), Tensor(t)).data) == pytest.approx(np.mean(per), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_pml_bounded(n_p, n_m, seed):
    rng = np.random.default_rng(seed)
    v = float(pml(Tensor(rng.normal(size=(n_p, 3))), Tensor(rng.normal(size=(n_m, 3)))).data)
    assert -1e-12 <= v <= 2 + 1e-12


def test_pml_empty_is_degenerate():
    with pytest.raises(DegenerateInputError):
        pml(Tensor(np.zeros((0, 3))), Tensor(np.ones((2, 3))))


def test_pml_gradient_flows_to_both_sides():
    rng = np.random.default_rng(3)
    p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    t = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    pml(p, t).backward()
    assert np.linalg.norm(p.grad) > 0 and np.linalg.norm(t.grad) > 0


# cross entropy and combined loss ------------------------------------------------------


def test_cross_entropy_uniform_logits():
    ce = cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]))
    assert float(ce.data) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


def test_combined_loss_parts():
    rng = np.random.default_rng(4)
    logits, y = Tensor(rng.normal(size=(2, 3))), np.array([1, 2])
    p, t = Tensor(rng.normal(size=(2, 4, 5))), Tensor(rng.normal(size=(2, 3, 5)))
    total, lc, lm = combined_loss(logits, y, p, t, 0.5)
    assert float(total.data) == pytest.approx(float(lc.data) + 0.5 * float(lm.data), abs=1e-14)
    only, lc2, none = combined_loss(logits, y, p, t, 0.0)
    assert none is None and float(only.data) == float(lc2.data)


# optimiser -----------------------------------------------------------------------------


def test_adamw_first_step_by_hand():
    p, g = np.array([1.0, -2.0]), np.array([0.5, -0.25])
    state = AdamState([np.zeros(2)], [np.zeros(2)])
    (new,) = adamw_step([p], [g], state, lr=0.1, weight_decay=0.01)
    # bias-corrected moments equal g and g^2, so the Adam step is lr * sign(g) up to eps
    expected = p - 0.1 * 0.01 * p - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(new, expected, atol=1e-15)


def test_adamw_zero_gradient_only_decays():
    state = AdamState([np.zeros(1)], [np.zeros(1)])
    (new,) = adamw_step([np.array([2.0])], [np.zeros(1)], state, lr=0.1, weight_decay=0.5)
    assert new[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_rejects_non_finite_gradient():
    state = AdamState([np.zeros(1)], [np.zeros(1)])
    with pytest.raises(FloatingPointError):
        adamw_step([np.array([1.0])], [np.array([np.nan])], state, lr=0.1, weight_decay=0.0)


def test_adamw_zero_gradient_zero_decay_is_identity():
    state = AdamState([np.zeros(2)], [np.zeros(2)])
    (new,) = adamw_step([np.array([0.3, -4.0])], [np.zeros(2)], state, lr=0.1, weight_decay=0.0)
    assert new.tolist() == [0.3, -4.0]


def test_adamw_minimises_quadratic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([x], lr=0.01, weight_decay=0.0, total_steps=0)  # constant rate
    for _ in range(500):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert abs(x.data[0]) < 1e-3


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0, abs=1e-15)
    lrs = [cosine_lr(1.0, t, 20) for t in range(21)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_m=-0.1)


# loops -------------------------------------------------------------------------------


def tiny_task(seed=0, n=12):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4, 4, 1))
    y = np.arange(n) % 3
    x[:, :2, :2, 0] += y[:, None, None] * 1.5
    return (x[: n // 2], y[: n // 2]), (x[n // 2:], y[n // 2:])


def frozen_model(seed=0):
    m = ViTModel(TINY, seed=seed)
    m.freeze_backbone(True)
    return m


def ship_setup(model, seed=0):
    spec = StrategySpec(mode="ship_full", partition=HierarchyPartition([[0, 1], [2, 3]]))
    hyper = PromptHyperparams(num_prompts=2, num_shared=1, num_attr_tokens=2, num_match_tokens=2,
                              attr_hierarchies=1, num_prototypes=3)
    state = PromptState.init(spec, 8, 4, hyper, seed)
    protos = PrototypeSet(np.random.default_rng(seed).normal(size=(3, 8)))
    return spec, state, protos


def test_train_keeps_backbone_bitwise_frozen():
    model = frozen_model()
    before = {k: v.data.copy() for k, v in model.backbone_parameters().items()}
    head_before = model.head["w"].data.copy()
    spec, state, protos = ship_setup(model)
    tr, te = tiny_task()
    train(model, state, tr, te, spec, TrainConfig(epochs=2, batch_size=4, lr=0.01, num_match_tokens=2), protos)
    for k, v in model.backbone_parameters().items():
        assert np.array_equal(v.data, before[k]), k
        assert v.grad is None
    assert not np.array_equal(model.head["w"].data, head_before)


def test_train_refuses_unfrozen_backbone():
    model = ViTModel(TINY)
    model.freeze_backbone(False)
    spec, state, protos = ship_setup(model)
    tr, te = tiny_task()
    with pytest.raises(ConfigError):
        train(model, state, tr, te, spec, TrainConfig(epochs=1), protos)


def test_train_is_deterministic_and_logs_pml():
    logs = []
    for _ in range(2):
        model = frozen_model()
        spec, state, protos = ship_setup(model)
        tr, te = tiny_task()
        logs.append(train(model, state, tr, te, spec, TrainConfig(epochs=2, batch_size=4, num_match_tokens=2),
                          protos))
    assert logs[0].comparable() == logs[1].comparable()
    assert all(r.train_pml > 0 for r in logs[0].records)


def test_linear_probe_mode_trains_head_only():
    model = frozen_model()
    tr, te = tiny_task()
    log = train(model, None, tr, te, StrategySpec(mode="none"), TrainConfig(epochs=2, batch_size=4))
    assert log.num_trainable == 8 * 3 + 3
    assert all(r.train_pml == 0 for r in log.records)


def test_pretrain_updates_backbone_and_freezes_it_afterwards():
    model = ViTModel(TINY, seed=1)
    before = model.blocks[0]["qkv_w"].data.copy()
    tr, te = tiny_task(1)
    log = pretrain(model, tr, te, TrainConfig(epochs=2, batch_size=4, lr=0.01))
    assert len(log.records) == 2
    assert not np.array_equal(model.blocks[0]["qkv_w"].data, before)
    assert not any(t.requires_grad for t in model.backbone_parameters().values())


def test_runlog_files(tmp_path):
    model = frozen_model()
    tr, te = tiny_task()
    log = train(model, None, tr, te, StrategySpec(mode="none"), TrainConfig(epochs=2, batch_size=4))
    log.write(tmp_path, "probe")
    lines = (tmp_path / "probe.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_loss,test_acc" and len(lines) == 3
    summary = json.loads((tmp_path / "probe.json").read_text())
    assert summary["strategy"] == "none" and summary["epochs"] == 2
    assert len(json.loads((tmp_path / "probe.timing.json").read_text())) == 2


def test_runlog_write_is_byte_identical_across_reruns(tmp_path):
    outs = []
    for i in range(2):
        model = frozen_model()
        tr, te = tiny_task()
        log = train(model, None, tr, te, StrategySpec(mode="none"), TrainConfig(epochs=1, batch_size=4))
        log.write(tmp_path / str(i), "r")
        outs.append(((tmp_path / str(i) / "r.csv").read_bytes(), (tmp_path / str(i) / "r.json").read_bytes()))
    assert outs[0] == outs[1]


def test_empty_runlog_writes_nulls(tmp_path):
    RunLog().write(tmp_path)
    assert json.loads((tmp_path / "runlog.json").read_text())["final_test_acc"] is None
