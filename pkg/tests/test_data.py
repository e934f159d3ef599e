import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from shiplab.data import (ActivationDump, DumpFormatError, DumpValidationError, SyntheticTaskSpec, decode_tensors,
                          dump_from_model, dump_layer_features, encode_tensors, export_dataset, generate_task,
                          linear_probe_accuracy, read_dump, read_tensors, write_dump, write_tensors)
from shiplab.hierarchy import affinity_from_features, collect_layer_features
from shiplab.vit import ViTConfig, ViTModel

SMALL = SyntheticTaskSpec(num_classes=4, train_per_class=10, test_per_class=5, patch_grid=2, patch_size=2,
                          channels=1)


# synthetic tasks --------------------------------------------------------------


def test_same_seed_is_bitwise_identical():
    a, b = generate_task(SMALL, 3), generate_task(SMALL, 3)
    for (xa, ya), (xb, yb) in zip(a, b):
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)


def test_different_seeds_differ():
    (xa, _), _ = generate_task(SMALL, 0)
    (xb, _), _ = generate_task(SMALL, 1)
    assert not np.array_equal(xa, xb)


def test_default_size_and_shapes():
    (x, y), (xt, yt) = generate_task(SyntheticTaskSpec(), 0)
    assert x.shape == (1000, 16, 16, 3) and len(y) == 1000
    assert xt.shape == (500, 16, 16, 3)
    assert np.bincount(y).tolist() == [100] * 10


def test_train_and_test_are_disjoint():
    (x, _), (xt, _) = generate_task(SMALL, 0)
    train_rows = {r.tobytes() for r in x}
    assert not any(r.tobytes() in train_rows for r in xt)


def test_degenerate_spec_is_rejected():
    with pytest.raises(ValueError):
        SyntheticTaskSpec(num_classes=0)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(semantic_depth=1.5)


@pytest.mark.parametrize("depth", [0.0, 1.0])
def test_task_is_linearly_separable(depth):
    spec = SyntheticTaskSpec(semantic_depth=depth, train_per_class=30, test_per_class=20)
    (x, y), (xt, yt) = generate_task(spec, 0)
    assert linear_probe_accuracy(x, y, xt, yt, 10, ridge=10.0) > 10 + 20


def test_label_shuffle_destroys_separability():
    spec = SyntheticTaskSpec()
    (x, y), (xt, yt) = generate_task(spec, 0)
    accs = []
    for s in range(5):
        rng = np.random.default_rng(s)
        accs.append(linear_probe_accuracy(x, rng.permutation(y), xt, yt, 10, ridge=10.0))
    assert abs(np.mean(accs) - 10.0) <= 5.0


def test_semantic_depth_moves_evidence_between_layout_and_texture():
    def class_means(depth):
        spec = SyntheticTaskSpec(semantic_depth=depth, nuisance=0.0, noise=0.0, train_per_class=1, test_per_class=0)
        (x, y), _ = generate_task(spec, 0)
        return x[np.argsort(y)]

    layout, texture = class_means(0.0), class_means(1.0)
    # layout images are constant inside each 4x4 patch; texture images have zero mean inside every patch
    patches = layout.reshape(10, 4, 4, 4, 4, 3)
    assert np.allclose(patches.std(axis=(2, 4)), 0.0)
    tp = texture.reshape(10, 4, 4, 4, 4, 3)
    assert np.allclose(tp.mean(axis=(2, 4)), 0.0)


def test_export_dataset(tmp_path):
    (x, y), _ = generate_task(SMALL, 0)
    export_dataset(tmp_path, x, y)
    (back,), meta = read_tensors(tmp_path / "dataset.bin")
    assert np.array_equal(back, x) and meta["count"] == len(x)
    assert (tmp_path / "dataset_labels.csv").read_text().splitlines()[1] == f"0,{y[0]}"


# tensor file format -----------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.lists(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=4),
       st.dictionaries(st.text(max_size=5), st.integers(-5, 5), max_size=3))
def test_round_trip_is_bitwise(tensors, meta):
    back, m = decode_tensors(encode_tensors(tensors, meta))
    assert m == meta and len(back) == len(tensors)
    for a, b in zip(tensors, back):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()


def test_header_layout():
    buf = encode_tensors([np.array([1.5])], {"a": 1})
    assert buf[:8] == b"SHIPTNSR"
    assert struct.unpack_from("<III", buf, 8) == (1, 1, len(b'{"a": 1}'))


def test_every_truncation_is_a_format_error():
    buf = encode_tensors([np.arange(6.0).reshape(2, 3), np.ones(2)], {"k": "v"})
    for cut in range(len(buf)):
        with pytest.raises(DumpFormatError) as info:
            decode_tensors(buf[:cut])
        assert 0 <= info.value.offset <= cut


def test_bad_magic_version_and_trailing_bytes():
    buf = encode_tensors([np.ones(2)])
    with pytest.raises(DumpFormatError, match="magic"):
        decode_tensors(b"XXXXXXXX" + buf[8:])
    bad_version = buf[:8] + struct.pack("<I", 9) + buf[12:]
    with pytest.raises(DumpFormatError, match="version"):
        decode_tensors(bad_version)
    with pytest.raises(DumpFormatError, match="trailing") as info:
        decode_tensors(buf + b"\x00")
    assert info.value.offset == len(buf)


def test_huge_declared_shape_is_caught():
    buf = bytearray(encode_tensors([np.ones(2)]))
    dims_at = 8 + 12 + 2 + 4  # header, "{}" meta, rank
    struct.pack_into("<Q", buf, dims_at, 2**63)
    with pytest.raises(DumpFormatError):
        decode_tensors(bytes(buf))


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=64))
def test_random_bytes_never_crash(junk):
    try:
        decode_tensors(b"SHIPTNSR" + junk)
    except DumpFormatError:
        pass


# activation dumps ---------------------------------------------------------------


def test_dump_round_trip_and_affinity_agreement(tmp_path):
    cfg = ViTConfig(num_layers=3, embed_dim=8, num_heads=2, patch_grid=2, patch_size=2, mlp_ratio=2,
                    image_channels=1, num_classes=2)
    model = ViTModel(cfg, seed=0)
    x = np.random.default_rng(0).normal(size=(5, 4, 4, 1))
    dump = dump_from_model(model, x)
    write_dump(tmp_path / "acts.bin", dump)
    back = read_dump(tmp_path / "acts.bin")
    assert back.meta == dump.meta
    for a, b in zip(dump.layers, back.layers):
        assert a.tobytes() == b.tobytes()
    direct = affinity_from_features(collect_layer_features(model, x)).S
    np.testing.assert_array_equal(affinity_from_features(dump_layer_features(back)).S, direct)


def test_layer_count_mismatch_is_a_validation_error(tmp_path):
    write_tensors(tmp_path / "bad.bin", [np.ones((2, 3, 4))] * 2, {"num_layers": 3})
    with pytest.raises(DumpValidationError):
        read_dump(tmp_path / "bad.bin")


def test_inconsistent_feature_dims():
    with pytest.raises(DumpValidationError):
        ActivationDump([np.ones((1, 2, 4)), np.ones((1, 2, 5))]).validate()
