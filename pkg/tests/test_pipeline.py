import dataclasses

import numpy as np
import pytest

from dmhash.cle import CleParams
from dmhash.dam import DamParams
from dmhash.data import SemiPairedSplit
from dmhash.errors import ConfigurationError, DataFormatError, StageError
from dmhash.gbe import GbeParams
from dmhash.pipeline import (
    DmhConfig, load_model, model_from_bytes, model_to_bytes, normalize_features, pca_embed,
    save_model, train_dmh, train_variant, write_log,
)


def _cfg(**kw):
    base = dict(
        cle=CleParams(d=4, k=3, max_iters=10), gbe=GbeParams(max_iters=30),
        dam=DamParams(lr1=1e-3, lr2=1e-3, epochs=5), c=8, outer_iters=2, outer_tol=0.0,
        hidden_dims1=(16, 8), hidden_dims2=(16, 8),
    )
    base.update(kw)
    return DmhConfig(**base)


@pytest.fixture(scope="module")
def trained(small_dataset, small_split):
    d = small_dataset
    return train_dmh(d.X1, d.X2, small_split, _cfg(), return_details=True)


def test_normalize_features_rows_unit_and_centered(rng):
    Z = rng.standard_normal((10, 4)) * [1, 5, 10, 0.1] + 3
    N = normalize_features(Z)
    np.testing.assert_allclose(np.linalg.norm(N, axis=1), 1)
    C = Z - Z.mean(0)
    np.testing.assert_allclose(N, C / np.linalg.norm(C, axis=1, keepdims=True))
    np.testing.assert_array_equal(normalize_features(np.ones((3, 2))), np.zeros((3, 2)))


def test_pca_embed_matches_svd_signs(rng):
    Y = rng.standard_normal((30, 5)) * [5, 3, 2, 1, 0.5]
    codes = pca_embed(Y, 3)
    Yc = Y - Y.mean(0)
    _, _, Vt = np.linalg.svd(Yc, full_matrices=False)
    scores = Yc @ Vt[:3].T
    # each column matches up to the eigenvector sign ambiguity
    for j in range(3):
        col = np.where(scores[:, j] > 0, 1.0, -1.0)
        assert np.array_equal(codes.H[:, j], col) or np.array_equal(codes.H[:, j], -col)
    with pytest.raises(ConfigurationError):
        pca_embed(Y[:3], 3)


def test_training_log_records(trained, small_split):
    log = trained.model.log
    assert [r["iteration"] for r in log] == [1, 2]
    for r in log:
        assert r["total"] == pytest.approx(r["l1"] + r["l2"] + r["l3"])
        assert (r["n"], r["n_m"], r["n_1"], r["n_2"]) == (
            small_split.n, small_split.n_m, small_split.n_1, small_split.n_2)
        assert r["max_orth_error"] < 1e-8
        assert r["z_refresh"] == {"dim1": 8, "dim2": 8}
    assert trained.Z1.shape == (small_split.n_m + small_split.n_1, 8)


def test_model_encodes_with_float32_weights(trained, small_dataset):
    m = trained.model
    for W, b in m.theta1.layers + m.theta2.layers:
        np.testing.assert_array_equal(W, W.astype(np.float32).astype(np.float64))
    H = m.encode(small_dataset.X1[:5], 1)
    assert H.shape == (5, 8) and set(np.unique(H)) <= {-1.0, 1.0}


def test_model_round_trip(trained, small_dataset, tmp_path):
    m = trained.model
    p = save_model(m, tmp_path / "m.dmh")
    m2 = load_model(p)
    assert m2.config == m.config and m2.log == m.log and m2.c == m.c
    for mod, X in ((1, small_dataset.X1), (2, small_dataset.X2)):
        np.testing.assert_array_equal(m2.encode(X, mod), m.encode(X, mod))
    assert model_to_bytes(m2) == p.read_bytes()


def test_model_file_corruption_detected(trained):
    raw = model_to_bytes(trained.model)
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    for bad in (raw[:10], b"NOTMODEL" + raw[8:], raw[:-4], bytes(flipped), raw[:40]):
        with pytest.raises(DataFormatError):
            model_from_bytes(bad)


def test_training_deterministic(small_dataset, small_split):
    d = small_dataset
    a = model_to_bytes(train_dmh(d.X1, d.X2, small_split, _cfg(outer_iters=1)))
    b = model_to_bytes(train_dmh(d.X1, d.X2, small_split, _cfg(outer_iters=1)))
    assert a == b


def test_full_and_zero_coincide_when_fully_paired(small_dataset):
    d = small_dataset
    split = SemiPairedSplit.fully_paired(d.n_total)
    a = train_dmh(d.X1, d.X2, split, _cfg())
    b = train_variant(d.X1, d.X2, split, _cfg(variant="zero"))
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]


def test_fix_variant_keeps_features(small_dataset, small_split):
    d = small_dataset
    res = train_variant(d.X1, d.X2, small_split, _cfg(variant="fix"), return_details=True)
    assert all("z_refresh" not in r for r in res.model.log)
    np.testing.assert_array_equal(res.Z1, d.X1[small_split.rows1])


def test_pca_variant_runs(small_dataset, small_split):
    d = small_dataset
    m = train_variant(d.X1, d.X2, small_split, _cfg(variant="pca"))
    assert m.log[0]["gbe_iters"] == 0


def test_outer_tol_stops_early(small_dataset, small_split):
    d = small_dataset
    m = train_dmh(d.X1, d.X2, small_split, _cfg(outer_iters=6, outer_tol=1e6))
    assert len(m.log) == 2


def test_config_validation(small_dataset, small_split):
    d = small_dataset
    with pytest.raises(ConfigurationError):
        train_dmh(d.X1, d.X2, small_split, _cfg(variant="bogus"))
    with pytest.raises(ConfigurationError):
        train_dmh(d.X1, d.X2, small_split, _cfg(cle=CleParams(d=9)))
    with pytest.raises(ConfigurationError):
        train_variant(d.X1, d.X2, small_split, _cfg())
    cfg = _cfg()
    assert DmhConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigurationError):
        DmhConfig.from_json({**cfg.to_json(), "bogus": 1})


def test_stage_error_names_stage(small_dataset, small_split):
    d = small_dataset
    X1 = np.array(d.X1)
    X1[small_split.paired[0], 0] = np.nan
    with pytest.raises(StageError) as ei:
        train_dmh(X1, d.X2, small_split, _cfg())
    assert "CLE" in str(ei.value) or "DAM" in str(ei.value)


def test_write_log_jsonl(trained, tmp_path):
    import json
    p = write_log(trained.model.log, tmp_path / "log.jsonl")
    lines = p.read_text().splitlines()
    assert [json.loads(x) for x in lines] == trained.model.log
