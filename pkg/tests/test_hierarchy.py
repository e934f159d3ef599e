import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_partition
from shiplab.autodiff import DegenerateInputError
from shiplab.hierarchy import (AffinityMatrix, HierarchyPartition, affinity_from_features, affinity_matrix,
                               greedy_partition, layer_feature, threshold_sweep, write_analysis)
from shiplab.vit import ConfigError, ViTConfig, ViTModel

VALUES = (0.0, 0.5, 0.9, 0.96, 1.0)


def sym(n, upper):
    S = np.eye(n)
    for (i, j), v in zip(itertools.combinations(range(n), 2), upper):
        S[i, j] = S[j, i] = v
    return S


def pattern_matrices(n, lam, rng):
    """One matrix per above/below-threshold pattern, entries drawn from VALUES."""
    above = np.array([v for v in VALUES if v >= lam])
    below = np.array([v for v in VALUES if v < lam])
    m = n * (n - 1) // 2
    bits = (np.arange(2**m)[:, None] >> np.arange(m)) & 1
    upper = np.where(bits, rng.choice(above, bits.shape), rng.choice(below, bits.shape))
    iu = np.triu_indices(n, 1)
    S = np.broadcast_to(np.eye(n), (len(bits), n, n)).copy()
    S[:, iu[0], iu[1]] = upper
    S[:, iu[1], iu[0]] = upper
    return S


# layer features and affinity ------------------------------------------------


def test_layer_feature_excludes_cls_and_normalises():
    z = np.zeros((3, 2))
    z[0] = [100.0, -100.0]  # CLS, ignored
    z[1] = [3.0, 0.0]
    z[2] = [3.0, 8.0]
    np.testing.assert_allclose(layer_feature(z), [0.6, 0.8])


def test_layer_feature_is_scale_invariant_and_batched():
    z = np.random.default_rng(0).normal(size=(4, 5, 3))
    np.testing.assert_allclose(layer_feature(z * 7.5), layer_feature(z), atol=1e-15)
    assert layer_feature(z).shape == (4, 3)


def test_layer_feature_zero_is_degenerate():
    with pytest.raises(DegenerateInputError):
        layer_feature(np.zeros((3, 2)))


def test_affinity_of_identical_layers_is_all_ones():
    f = np.tile(np.array([[0.6, 0.8]]), (5, 4, 1))
    np.testing.assert_allclose(affinity_from_features(f).S, np.ones((4, 4)), atol=1e-15)


def test_affinity_averages_over_samples():
    f = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]]])
    np.testing.assert_allclose(affinity_from_features(f).S, [[1.0, 0.5], [0.5, 1.0]])


def test_affinity_from_model_is_valid_and_sample_order_free():
    cfg = ViTConfig(num_layers=4, embed_dim=8, num_heads=2, patch_grid=2, patch_size=2, mlp_ratio=2,
                    image_channels=1, num_classes=2)
    model = ViTModel(cfg, seed=0)
    x = np.random.default_rng(1).normal(size=(6, 4, 4, 1))
    S = affinity_matrix(model, x)
    S.validate()
    assert S.S.shape == (4, 4) and S.sample_count == 6
    S2 = affinity_matrix(model, x[::-1].copy(), batch_size=4)
    np.testing.assert_allclose(S.S, S2.S, atol=1e-13)


def test_affinity_subsamples_deterministically():
    cfg = ViTConfig(num_layers=2, embed_dim=4, num_heads=1, patch_grid=2, patch_size=1, mlp_ratio=1,
                    image_channels=1, num_classes=2)
    model = ViTModel(cfg, seed=0)
    x = np.random.default_rng(2).normal(size=(20, 2, 2, 1))
    a = affinity_matrix(model, x, max_samples=5, seed=3)
    b = affinity_matrix(model, x, max_samples=5, seed=3)
    assert a.sample_count == 5 and np.array_equal(a.S, b.S)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 10_000))
def test_affinity_invariants(samples, layers, seed):
    raw = np.random.default_rng(seed).normal(size=(samples, layers, 3))
    f = raw / np.linalg.norm(raw, axis=-1, keepdims=True)
    S = affinity_from_features(f)
    S.validate()


def test_validate_rejects_asymmetry():
    with pytest.raises(ValueError):
        AffinityMatrix(np.array([[1.0, 0.2], [0.3, 1.0]]), 1).validate()


# greedy partition -----------------------------------------------------------


def test_greedy_worked_examples():
    S = np.array([[1.0, 0.97, 0.96, 0.5],
                  [0.97, 1.0, 0.99, 0.6],
                  [0.96, 0.99, 1.0, 0.7],
                  [0.5, 0.6, 0.7, 1.0]])
    assert greedy_partition(S, 0.95).groups == [[0, 1, 2], [3]]
    assert greedy_partition(S, 0.965).groups == [[0, 1], [2], [3]]
    assert greedy_partition(S, 0.965, rule="consecutive").groups == [[0, 1, 2], [3]]
    assert greedy_partition(S, -1.0).groups == [[0, 1, 2, 3]]
    assert greedy_partition(S, 1.0).groups == [[0], [1], [2], [3]]


def test_threshold_equal_to_affinity_joins():
    S = np.array([[1.0, 0.95], [0.95, 1.0]])
    assert greedy_partition(S, 0.95).groups == [[0, 1]]


@pytest.mark.parametrize("lam", [1.01, -1.5])
def test_threshold_out_of_range(lam):
    with pytest.raises(ConfigError):
        greedy_partition(np.eye(3), lam)


def test_unknown_rule():
    with pytest.raises(ConfigError):
        greedy_partition(np.eye(3), 0.5, rule="median")


@pytest.mark.parametrize("lam", [0.5, 0.95])
@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_greedy_matches_brute_force_on_every_value_matrix(n, lam):
    for upper in itertools.product(VALUES, repeat=n * (n - 1) // 2):
        S = sym(n, upper)
        got = greedy_partition(S, lam)
        assert got.groups == brute_force_partition(S, lam)
        got.validate(n)


@pytest.mark.parametrize("rule", ["anchor", "consecutive"])
@pytest.mark.parametrize("lam", [0.5, 0.95])
def test_greedy_matches_brute_force_on_every_threshold_pattern(lam, rule):
    rng = np.random.default_rng(0)
    for n in (5, 6):
        for S in pattern_matrices(n, lam, rng):
            assert greedy_partition(S, lam, rule).groups == brute_force_partition(S, lam, rule)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.data())
def test_partition_is_contiguous_and_covering(n, data):
    upper = data.draw(st.lists(st.floats(-1, 1), min_size=n * (n - 1) // 2, max_size=n * (n - 1) // 2))
    lam = data.draw(st.floats(-1, 1))
    rule = data.draw(st.sampled_from(["anchor", "consecutive"]))
    part = greedy_partition(sym(n, upper), lam, rule)
    part.validate(n)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.data())
def test_group_count_monotone_in_threshold_for_consecutive_rule(n, data):
    upper = data.draw(st.lists(st.floats(-1, 1), min_size=n * (n - 1) // 2, max_size=n * (n - 1) // 2))
    lo, hi = sorted(data.draw(st.lists(st.floats(-1, 1), min_size=2, max_size=2)))
    S = sym(n, upper)
    assert greedy_partition(S, lo, "consecutive").num_hierarchies <= greedy_partition(S, hi, "consecutive").num_hierarchies


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.data())
def test_group_count_monotone_for_anchor_rule_on_decaying_affinity(n, data):
    """When affinity never increases with layer distance, the anchor rule is monotone too."""
    steps = data.draw(st.lists(st.floats(0, 0.3), min_size=n * n, max_size=n * n))
    S = np.eye(n)
    for dist in range(1, n):
        for i in range(n - dist):
            j = i + dist
            S[i, j] = S[j, i] = min(S[i, j - 1], S[i + 1, j]) - steps[i * n + j]
    lo, hi = sorted(data.draw(st.lists(st.floats(-1, 1), min_size=2, max_size=2)))
    assert greedy_partition(S, lo).num_hierarchies <= greedy_partition(S, hi).num_hierarchies


def test_anchor_rule_group_count_can_rise_when_threshold_falls():
    """A lower threshold lets an early anchor swallow layers, leaving a poorly connected tail."""
    S = np.ones((5, 5))
    S[0, 3] = S[3, 0] = 0.0
    S[0, 4] = S[4, 0] = 0.0
    S[0, 1] = S[1, 0] = S[0, 2] = S[2, 0] = 0.5
    S[3, 4] = S[4, 3] = 0.0
    assert greedy_partition(S, 0.95).groups == [[0], [1, 2, 3, 4]]
    assert greedy_partition(S, 0.5).groups == [[0, 1, 2], [3], [4]]
    # the consecutive rule stays monotone on the same matrix
    assert greedy_partition(S, 0.95, "consecutive").num_hierarchies >= \
        greedy_partition(S, 0.5, "consecutive").num_hierarchies


# sweep and outputs ------------------------------------------------------------


def test_sweep_endpoints():
    S = np.array([[1.0, 0.9, 0.2], [0.9, 1.0, 0.8], [0.2, 0.8, 1.0]])
    sweep = threshold_sweep(S, [1.0, 0.85, -1.0])
    assert [e.M for e in sweep] == [3, 2, 1]
    assert sweep[1].partition.groups == [[0, 1], [2]]
    assert sweep[1].alternative.rule == "consecutive"
    assert sweep[1].alternative.groups == [[0, 1], [2]]


def test_empty_sweep_is_rejected():
    with pytest.raises(ConfigError):
        threshold_sweep(np.eye(2), [])


def test_partition_json_round_trip():
    p = HierarchyPartition([[0, 1], [2]], 0.9, "consecutive")
    q = HierarchyPartition.from_json(json.loads(json.dumps(p.to_json())))
    assert (q.groups, q.threshold, q.rule) == (p.groups, p.threshold, p.rule)


def test_partition_validate_rejects_gaps():
    with pytest.raises(ValueError):
        HierarchyPartition([[0], [2]]).validate(3)
    with pytest.raises(ValueError):
        HierarchyPartition([[0], []]).validate(1)


def test_write_analysis_outputs(tmp_path):
    S = AffinityMatrix(np.array([[1.0, 0.25], [0.25, 1.0]]), 3)
    sweep = threshold_sweep(S, [0.95, 0.1])
    write_analysis(tmp_path, S, sweep, sweep[0].partition)
    with open(tmp_path / "affinity.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and float(rows[1]["value"]) == 0.25
    assert json.loads((tmp_path / "affinity.json").read_text())["sample_count"] == 3
    assert [r["M"] for r in json.loads((tmp_path / "sweep.json").read_text())] == [2, 1]
    assert json.loads((tmp_path / "partition.json").read_text())["groups"] == [[0], [1]]
