import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vsml.tasks import (IdxFormatError, TaskError, TaskSpec, apply_projection, encode_idx, input_permutation,
                        linear_toy_episode, load_dataset, make_episode, parse_idx, read_idx_file, repeated_pairs,
                        rescale)

from conftest import write_idx_dataset


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6)))
def test_idx_roundtrip(arr):
    out = parse_idx(encode_idx(arr))
    assert out.shape == arr.shape
    assert np.array_equal(out, arr)


@given(hnp.arrays(np.dtype(">f8"), hnp.array_shapes(max_dims=2, max_side=4),
                  elements=st.floats(-1e6, 1e6)))
def test_idx_roundtrip_big_endian_float(arr):
    assert np.array_equal(parse_idx(encode_idx(arr)), arr)


def test_idx_bad_magic_reports_offset():
    with pytest.raises(IdxFormatError) as info:
        parse_idx(b"\x01\x00\x08\x01" + b"\x00\x00\x00\x01" + b"\x05")
    assert info.value.offset == 0


def test_idx_truncated_payload_names_lengths():
    data = encode_idx(np.zeros((3, 4), dtype=np.uint8))[:-2]
    with pytest.raises(IdxFormatError, match="expected 12 bytes, got 10"):
        parse_idx(data)


def test_idx_truncated_header():
    with pytest.raises(IdxFormatError, match="truncated header"):
        parse_idx(b"\x00\x00\x08\x03\x00\x00")


def test_idx_unknown_type():
    with pytest.raises(IdxFormatError, match="unknown element type"):
        parse_idx(b"\x00\x00\x07\x01\x00\x00\x00\x00")


def test_read_gzip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    (tmp_path / "a.gz").write_bytes(gzip.compress(encode_idx(arr)))
    assert np.array_equal(read_idx_file(tmp_path / "a.gz"), arr)


@pytest.mark.parametrize("gz", [False, True])
def test_load_dataset(tmp_path, gz):
    write_idx_dataset(tmp_path, gz=gz)
    ds = load_dataset("digits", "test", tmp_path)
    assert ds.images.shape == (60, 8, 8)
    assert ds.n_classes == 10


def test_load_dataset_env(tmp_path, monkeypatch):
    write_idx_dataset(tmp_path)
    monkeypatch.setenv("DATA_ROOT", str(tmp_path))
    assert len(load_dataset("digits").labels) == 60


def test_missing_dataset(tmp_path):
    with pytest.raises(TaskError, match="missing dataset file"):
        load_dataset("nothing", "train", tmp_path)


def test_rescale_constant_image_stays_constant():
    img = np.full((28, 28), 0.25)
    for size in (14, 28, 32):
        assert np.allclose(rescale(img, size), 0.25)


def test_rescale_identity_at_same_size():
    img = np.random.default_rng(0).random((28, 28))
    assert np.allclose(rescale(img, 28), img)


def test_rescale_rejects_size():
    with pytest.raises(TaskError):
        rescale(np.zeros((28, 28)), 20)


def test_projection_none_is_identity():
    x = np.random.default_rng(1).random((5, 16))
    assert np.array_equal(apply_projection(x, None), x)


def test_projection_preserves_norm_on_average():
    x = np.random.default_rng(2).standard_normal((2000, 64))
    ratio = np.linalg.norm(apply_projection(x, 7), axis=1) ** 2 / np.linalg.norm(x, axis=1) ** 2
    assert abs(ratio.mean() - 1.0) < 0.1


@given(st.integers(1, 50), st.integers(0, 1000))
def test_permutation_is_a_permutation(n, seed):
    assert sorted(input_permutation(n, seed)) == list(range(n))


def test_episode_deterministic():
    spec = TaskSpec(source="clusters", project=True, length=30)
    a, b = make_episode(spec, 5), make_episode(spec, 5)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, make_episode(spec, 6).x)


def test_projection_seed_pins_the_map():
    spec = TaskSpec(source="clusters", project=True, projection_seed=3, length=10)
    assert make_episode(spec, 0).meta["projection_seed"] == 3
    free = TaskSpec(source="clusters", project=True, length=10)
    assert make_episode(free, 11).meta["projection_seed"] == 11


def test_dataset_episode_no_repeats(idx_root):
    ds = load_dataset("digits", "train", idx_root)
    spec = TaskSpec(source="digits", classes=10, length=50)
    ep = make_episode(spec, 0, ds)
    rows = {tuple(r) for r in ep.x}
    assert len(rows) == 50
    assert ep.input_dim == 64


def test_dataset_episode_class_subset(idx_root):
    ds = load_dataset("digits", "train", idx_root)
    ep = make_episode(TaskSpec(source="digits", classes=[3, 7], length=12), 0, ds)
    assert set(ep.y) <= {0, 1}
    assert ep.n_classes == 2


def test_dataset_rescale(idx_root):
    ds = load_dataset("digits", "train", idx_root)
    ep = make_episode(TaskSpec(source="digits", rescale=14, length=5), 0, ds)
    assert ep.input_dim == 196
    assert ep.x.min() >= 0 and ep.x.max() <= 1


def test_random_task_repeats_small_pool():
    ep = make_episode(TaskSpec(source="random", dims=4, n_points=5, length=20), 3)
    assert len({tuple(r) for r in ep.x}) == 5


def test_sum_sign_labels():
    ep = make_episode(TaskSpec(source="sum-sign", dims=6, length=40), 0)
    assert np.array_equal(ep.y, (ep.x.sum(axis=1) < 0).astype(int)) or np.array_equal(
        ep.y, (ep.x.sum(axis=1) > 0).astype(int))


def test_linear_toy_separable():
    ep = linear_toy_episode(0, 100)
    assert set(ep.y) == {0, 1}
    assert ep.meta["toy"] == "linear"


def test_repeated_pairs():
    ep = make_episode(TaskSpec(length=6), 0)
    rep = repeated_pairs(ep)
    assert len(rep) == 12
    assert np.array_equal(rep.x[0], rep.x[1]) and rep.y[4] == rep.y[5]


def test_taskspec_rejects_unknown_keys():
    with pytest.raises(TaskError, match="unknown task keys"):
        TaskSpec.from_dict({"source": "clusters", "colour": 1})


def test_taskspec_roundtrip():
    spec = TaskSpec(source="digits", classes=(1, 2), rescale=14, project=True)
    assert TaskSpec.from_dict(spec.to_dict()) == spec


def test_taskspec_validation():
    with pytest.raises(TaskError):
        TaskSpec(length=0)
    with pytest.raises(TaskError):
        TaskSpec(source="clusters", dims=10)
