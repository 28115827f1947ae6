import json
import math

import numpy as np
import pytest

from dmhash.data import (
    MultimodalDataset, SemiPairedSplit, SyntheticConfig, apply_semi_pairing, generate_synthetic,
    load_dataset, make_semi_paired, save_dataset, split_query_retrieval,
)
from dmhash.errors import ConfigurationError, DataFormatError, ShapeError


def test_dataset_validation_rejects_mismatched_rows():
    with pytest.raises(ShapeError):
        MultimodalDataset(np.zeros((3, 2)), np.zeros((4, 2)))


def test_dataset_rejects_non_finite():
    X = np.ones((2, 2))
    X[0, 0] = np.nan
    with pytest.raises(ShapeError):
        MultimodalDataset(X, np.ones((2, 2)))


def test_dataset_arrays_are_read_only(small_dataset):
    with pytest.raises(ValueError):
        small_dataset.X1[0, 0] = 1.0


def test_generator_shapes_and_labels():
    cfg = SyntheticConfig(n_total=100, d1=20, d2=15, d_latent=5, n_clusters=4, seed=3)
    ds = generate_synthetic(cfg)
    assert ds.X1.shape == (100, 20) and ds.X2.shape == (100, 15)
    assert ds.labels.shape == (100, 4)
    assert np.all(ds.labels.sum(axis=1) == 1)
    counts = ds.labels.sum(axis=0)
    assert counts.max() - counts.min() <= 1


def test_generator_is_seeded():
    a = generate_synthetic(SyntheticConfig(n_total=50, seed=1))
    b = generate_synthetic(SyntheticConfig(n_total=50, seed=1))
    c = generate_synthetic(SyntheticConfig(n_total=50, seed=2))
    assert np.array_equal(a.X1, b.X1) and np.array_equal(a.X2, b.X2)
    assert not np.array_equal(a.X1, c.X1)


def test_generator_noise_free_data_is_linear_in_latent():
    ds = generate_synthetic(SyntheticConfig(n_total=40, noise_sigma=0.0, seed=0))
    assert np.allclose(ds.X1, ds.latent @ ds.P1, atol=1e-5)


@pytest.mark.parametrize("bad", [dict(d_latent=100), dict(n_clusters=1), dict(noise_sigma=-1.0), dict(n_total=0)])
def test_generator_config_validation(bad):
    with pytest.raises(ConfigurationError):
        SyntheticConfig(**bad).validate()


@pytest.mark.parametrize("n,r", [(100, 0.5), (101, 0.5), (1000, 0.1), (37, 0.9), (10, 1.0)])
def test_semi_pairing_counts(n, r):
    split = make_semi_paired(n, r, seed=0)
    assert split.n_m == math.floor(r * n)
    assert split.n == n
    rest = n - split.n_m
    assert split.n_1 == math.ceil(rest / 2) and split.n_2 == rest // 2
    allidx = np.sort(np.concatenate([split.paired, split.only1, split.only2]))
    assert np.array_equal(allidx, np.arange(n))


def test_semi_pairing_too_few_pairs_names_requirement():
    with pytest.raises(ConfigurationError, match="k\\+1=4"):
        make_semi_paired(10, 0.2, k=3)


def test_semi_pairing_rejects_bad_ratio():
    with pytest.raises(ConfigurationError):
        make_semi_paired(10, 1.5)


def test_split_masks_follow_object_order():
    split = make_semi_paired(20, 0.5, seed=1)
    assert split.has1.sum() == split.n_m + split.n_1
    assert split.has2.sum() == split.n_m + split.n_2
    assert np.all(split.has1[: split.n_m] & split.has2[: split.n_m])
    assert not split.has2[split.n_m : split.n_m + split.n_1].any()


def test_split_disjointness_enforced():
    with pytest.raises(ConfigurationError):
        SemiPairedSplit(np.array([0, 1]), np.array([1]), np.array([2]))


def test_apply_semi_pairing_keeps_paired_rows(small_dataset, small_split):
    view = apply_semi_pairing(small_dataset, small_split)
    p = small_split.paired
    assert np.array_equal(view.ids1[p], view.ids2[p])
    assert np.array_equal(view.X2[p], small_dataset.X2[p])
    assert sorted(view.ids2) == sorted(small_dataset.ids2)


def test_query_retrieval_split_partitions(small_dataset):
    q, r = split_query_retrieval(small_dataset, 20, seed=0)
    assert q.n_total == 20 and r.n_total == 100
    assert set(q.ids1) | set(r.ids1) == set(range(120))
    assert not set(q.ids1) & set(r.ids1)


def test_save_load_round_trip(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert np.array_equal(back.X1, small_dataset.X1)
    assert np.array_equal(back.X2, small_dataset.X2)
    assert np.array_equal(back.labels, small_dataset.labels)
    meta = json.loads((tmp_path / "ds" / "meta.json").read_text())
    assert meta["n_total"] == 120 and meta["d1"] == 12


def test_load_rejects_truncated_payload(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    f = tmp_path / "ds" / "X2.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(DataFormatError, match="d2"):
        load_dataset(tmp_path / "ds")


def test_load_rejects_bad_manifest(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    meta = tmp_path / "ds" / "meta.json"
    m = json.loads(meta.read_text())
    m["d1"] = "twelve"
    meta.write_text(json.dumps(m))
    with pytest.raises(DataFormatError, match="d1"):
        load_dataset(tmp_path / "ds")


def test_load_rejects_non_finite(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    f = tmp_path / "ds" / "X1.f32"
    raw = bytearray(f.read_bytes())
    raw[:4] = np.array([np.inf], dtype="<f4").tobytes()
    f.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="X1"):
        load_dataset(tmp_path / "ds")


def test_load_missing_directory(tmp_path):
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path / "nope")
