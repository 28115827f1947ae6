"""Acceptance suite: numbered checks with measured values and pinned tolerances.

Used by ``dmh acceptance`` and by ``tests/test_acceptance.py``. The end-to-end
checks (10 to 13) share one cache of training runs keyed by
``(seed, pairing_ratio, variant)``.
"""
from __future__ import annotations

import dataclasses
import itertools
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cle import (
    CleParams, orthogonality_error, orthogonalize, row_objective, run_cle,
    update_embedding_row, update_weights,
)
from .dam import DamParams, EncoderArch, batch_gradients, batch_loss, init_encoder
from .data import SemiPairedSplit, SyntheticConfig, generate_synthetic, make_semi_paired, split_query_retrieval
from .evaluation import (
    RelevanceOracle, average_precision, hamming_distance, mean_average_precision,
    pr_curve_hash_lookup, topn_precision_curve,
)
from .gbe import GbeParams, gbe_gradient, gbe_loss, similarity_from_codes, similarity_from_embedding
from .pipeline import DmhConfig, train_dmh

DEFAULT_SEEDS = (0, 1, 2, 3, 4)

# Scaled-down retrieval setup shared by checks 10-13.
E2E_DATA = dict(n_total=1200, d_latent=8, d1=64, d2=64, n_clusters=4, noise_sigma=2.0)
E2E_QUERIES = 200
E2E_BITS = 16
E2E_HIDDEN = (64, 32)
E2E_DAM = dict(lr1=1e-3, lr2=1e-3, epochs=600)
E2E_CLE_D = 16


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    measured: object
    required: str
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        m = f"{self.measured:.6g}" if isinstance(self.measured, float) else str(self.measured)
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.number:2d} {self.name}: measured {m}, required {self.required} [{self.seconds:.1f}s]{extra}"


def _rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


# -- 1-2: gradient oracles ---------------------------------------------------

def criterion_1(seed=0):
    rng = np.random.default_rng(seed)
    h = 1e-5
    worst = 0.0
    gammas = (0.0, 0.01, 1.0)
    for t in range(20):
        n, c = int(rng.integers(3, 11)), int(rng.integers(1, 9))
        gamma = gammas[t % 3]
        S = similarity_from_embedding(np.abs(rng.standard_normal((n, 4))) + 0.1)
        # keep entries away from zero so the piecewise sign target is locally constant
        H = rng.choice([-1.0, 1.0], (n, c)) * rng.uniform(0.2, 1.5, (n, c))
        g = gbe_gradient(S, H, gamma)
        fd = np.empty_like(H)
        for i, j in itertools.product(range(n), range(c)):
            Hp, Hm = H.copy(), H.copy()
            Hp[i, j] += h
            Hm[i, j] -= h
            fd[i, j] = (gbe_loss(S, Hp, gamma) - gbe_loss(S, Hm, gamma)) / (2 * h)
        worst = max(worst, float(_rel_err(g, fd).max()))
    return worst, worst < 1e-5, "< 1e-5"


def criterion_2(seed=0):
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for dims in ((3, (4,), 2), (5, (8,), 4), (5, (5, 5), 5), (4, (6, 3), 2)):
        d_in, hidden, c = dims
        p = init_encoder(EncoderArch(d_in, c, hidden), int(rng.integers(1 << 30)))
        p.layers = [(W, rng.normal(0, 0.3, b.shape)) for W, b in p.layers]
        X = rng.standard_normal((7, d_in))
        H = rng.choice([-1.0, 1.0], (7, c))
        grads = batch_gradients(p, X, H)
        for li, (W, b) in enumerate(p.layers):
            for arr, g in ((W, grads[li][0]), (b, grads[li][1])):
                fd = np.empty_like(arr)
                for idx in np.ndindex(arr.shape):
                    old = arr[idx]
                    arr[idx] = old + h
                    lp = batch_loss(p, X, H)
                    arr[idx] = old - h
                    lm = batch_loss(p, X, H)
                    arr[idx] = old
                    fd[idx] = (lp - lm) / (2 * h)
                worst = max(worst, float(_rel_err(g, fd).max()))
    return worst, worst < 1e-5, "< 1e-5"


# -- 3-6: manifold embedding -------------------------------------------------

def _constrained_lsq(center, nbrs):
    # min ||center - nbrs^T w||^2 s.t. sum w = 1, via the KKT system
    k = nbrs.shape[0]
    B = center[None, :] - nbrs
    G = B @ B.T
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2 * G
    kkt[:k, k] = 1
    kkt[k, :k] = 1
    rhs = np.zeros(k + 1)
    rhs[k] = 1
    return np.linalg.solve(kkt, rhs)[:k]


def criterion_3(seed=0):
    rng = np.random.default_rng(seed)
    worst, worst_sum = 0.0, 0.0
    for _ in range(100):
        k = int(rng.integers(1, 6))
        d = int(rng.integers(k, k + 6))  # d >= k keeps the Gram matrix well conditioned
        center = rng.standard_normal(d)
        nbrs = rng.standard_normal((k, d))
        w = update_weights(center, nbrs)
        worst = max(worst, float(np.abs(w - _constrained_lsq(center, nbrs)).max()))
        worst_sum = max(worst_sum, abs(float(w.sum()) - 1.0))
    ok = worst <= 1e-8 and worst_sum <= 1e-10
    return worst, ok, "<= 1e-8 (row sums within 1e-10)", f"max |sum-1| = {worst_sum:.2e}"


def criterion_4(seeds=DEFAULT_SEEDS[:1]):
    worst = 0.0
    for seed in seeds:
        run = e2e_run(seed, 0.5, "full")
        worst = max(worst, max(r["max_orth_error"] for r in run["log"]))
    return worst, worst <= 1e-8, "<= 1e-8 after every projection update"


def criterion_5(seed=0):
    rng = np.random.default_rng(seed)
    h = 1e-6
    worst = 0.0
    for _ in range(50):
        dz1, dz2, d = (int(v) for v in rng.integers(4, 10, 3))
        k = int(rng.integers(1, 5))
        d = min(d, dz1, dz2)
        Q1 = orthogonalize(rng.standard_normal((dz1, d)))
        Q2 = orthogonalize(rng.standard_normal((dz2, d)))
        z1, z2 = rng.standard_normal(dz1), rng.standard_normal(dz2)
        w = rng.dirichlet(np.ones(k))
        nY = rng.standard_normal((k, d))
        lam, eta, n = float(rng.uniform(0, 1)), float(rng.uniform(0, 0.1)), int(rng.integers(5, 50))
        y = update_embedding_row(z1, z2, Q1, Q2, w, nY, lam, eta, n)
        scale = 0.0
        grad = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fp = row_objective(y + e, z1, z2, Q1, Q2, w, nY, lam, eta, n)
            fm = row_objective(y - e, z1, z2, Q1, Q2, w, nY, lam, eta, n)
            grad[j] = (fp - fm) / (2 * h)
        # gradient magnitude of the objective at the origin sets the scale
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fp = row_objective(e, z1, z2, Q1, Q2, w, nY, lam, eta, n)
            fm = row_objective(-e, z1, z2, Q1, Q2, w, nY, lam, eta, n)
            scale += ((fp - fm) / (2 * h)) ** 2
        worst = max(worst, float(np.linalg.norm(grad) / max(np.sqrt(scale), 1e-300)))
    return worst, worst < 1e-5, "< 1e-5 relative"


def criterion_6(seed=0):
    rng = np.random.default_rng(seed)
    n, d, dz1, dz2 = 60, 4, 12, 10
    Y = rng.standard_normal((n, d))
    Q1 = orthogonalize(rng.standard_normal((dz1, d)))
    Q2 = orthogonalize(rng.standard_normal((dz2, d)))
    split = SemiPairedSplit.fully_paired(n)
    st = run_cle(Y @ Q1.T, Y @ Q2.T, split, CleParams(lam=0.0, eta=0.0, d=d, k=3, max_iters=50, tol=1e-12), seed=seed)
    res = st.Zbar1 - st.Y @ st.Q1.T, st.Zbar2 - st.Y @ st.Q2.T
    recon = float((np.sum(res[0] ** 2) + np.sum(res[1] ** 2)) / (2 * n))
    return recon, recon < 1e-6 and st.n_sweeps <= 50, "< 1e-6 within 50 sweeps", f"{st.n_sweeps} sweeps"


# -- 7-9: distributions, Hamming, metrics -----------------------------------

def _kl(P, Q):
    m = P > 0
    return float(np.sum(P[m] * np.log(P[m] / Q[m])))


def criterion_7(seed=0):
    rng = np.random.default_rng(seed)
    worst_sum, min_entry, worst_diag, min_kl = 0.0, np.inf, 0.0, np.inf
    for _ in range(50):
        n, d = int(rng.integers(2, 15)), int(rng.integers(1, 8))
        Y = rng.standard_normal((n, d))
        Y[0] = np.abs(Y[0]) + 0.1
        Y[1] = np.abs(Y[1]) + 0.1  # at least one positive inner product
        for S in (similarity_from_embedding(Y), similarity_from_codes(rng.standard_normal((n, d)))):
            worst_sum = max(worst_sum, abs(float(S.sum()) - 1.0))
            min_entry = min(min_entry, float(S.min()))
            worst_diag = max(worst_diag, float(np.abs(np.diag(S)).max()))
        P = similarity_from_embedding(Y)
        Q = similarity_from_codes(rng.standard_normal((n, d)))
        min_kl = min(min_kl, _kl(P, Q), gbe_loss(P, rng.standard_normal((n, d)), 0.0))
    # matching instances: equal inner products against equal code distances
    match = 0.0
    for n in (2, 3, 5, 8):
        Y = np.hstack([np.eye(n), np.ones((n, 1))])
        P = similarity_from_embedding(Y)
        match = max(match, abs(gbe_loss(P, 0.7 * np.eye(n), 0.0)))
    ok = worst_sum <= 1e-9 and min_entry >= 0 and worst_diag == 0 and min_kl >= -1e-12 and match <= 1e-10
    detail = f"sum err {worst_sum:.1e}, min KL {min_kl:.2e}, matching KL {match:.1e}"
    return worst_sum, ok, "sum within 1e-9, KL >= -1e-12 (round-off), matching KL <= 1e-10", detail


def criterion_8(seed=0):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(1000):
        c = int(rng.integers(1, 200))
        a, b = rng.choice([-1.0, 1.0], (2, c))
        if hamming_distance(a, b) != int(round(0.25 * np.sum((a - b) ** 2))):
            mismatches += 1
    return mismatches, mismatches == 0, "0 mismatches"


def _brute_map(Qc, Bc, R, radius=None):
    aps = []
    for qi in range(Qc.shape[0]):
        dist = [int(np.sum(Qc[qi] != Bc[j])) for j in range(Bc.shape[0])]
        order = sorted(range(Bc.shape[0]), key=lambda j: (dist[j], j))
        if radius is not None:
            order = order[:radius]
        hits, acc = 0, 0.0
        for pos, j in enumerate(order, 1):
            if R[qi, j]:
                hits += 1
                acc += hits / pos
        aps.append(acc / hits if hits else 0.0)
    return float(np.mean(aps))


def _brute_pr(Qc, Bc, R):
    c = Qc.shape[1]
    out = []
    for r in range(c + 1):
        precs, recs = [], []
        for qi in range(Qc.shape[0]):
            ret = [j for j in range(Bc.shape[0]) if np.sum(Qc[qi] != Bc[j]) <= r]
            hit = sum(1 for j in ret if R[qi, j])
            if ret:
                precs.append(hit / len(ret))
            tot = int(R[qi].sum())
            if tot:
                recs.append(hit / tot)
        out.append((r, float(np.mean(precs)) if precs else 0.0, float(np.mean(recs)) if recs else 0.0))
    return out


def criterion_9(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(30):
        nq, nb, c, L = int(rng.integers(1, 6)), int(rng.integers(1, 21)), int(rng.integers(1, 9)), int(rng.integers(1, 4))
        Qc = rng.choice([-1.0, 1.0], (nq, c))
        Bc = rng.choice([-1.0, 1.0], (nb, c))
        ql = (rng.random((nq, L)) < 0.4).astype(np.uint8)
        bl = (rng.random((nb, L)) < 0.4).astype(np.uint8)
        R = (ql.astype(int) @ bl.T.astype(int)) > 0
        oracle = RelevanceOracle(ql, bl)
        radius = int(rng.integers(1, nb + 1))
        worst = max(worst, abs(mean_average_precision(Qc, Bc, oracle) - _brute_map(Qc, Bc, R)))
        worst = max(worst, abs(mean_average_precision(Qc, Bc, oracle, radius) - _brute_map(Qc, Bc, R, radius)))
        for qi in range(nq):
            dist = [int(np.sum(Qc[qi] != Bc[j])) for j in range(nb)]
            order = sorted(range(nb), key=lambda j: (dist[j], j))
            worst = max(worst, abs(average_precision(order, R[qi]) - _brute_map(Qc[qi:qi + 1], Bc, R[qi:qi + 1])))
        for N, p in topn_precision_curve(Qc, Bc, oracle, n_points=5):
            bp = []
            for qi in range(nq):
                dist = [int(np.sum(Qc[qi] != Bc[j])) for j in range(nb)]
                order = sorted(range(nb), key=lambda j: (dist[j], j))[:N]
                bp.append(sum(R[qi, j] for j in order) / N)
            worst = max(worst, abs(p - float(np.mean(bp))))
        for (r1, p1, q1), (r2, p2, q2) in zip(pr_curve_hash_lookup(Qc, Bc, oracle), _brute_pr(Qc, Bc, R)):
            worst = max(worst, abs(p1 - p2), abs(q1 - q2), abs(r1 - r2))
    return worst, worst <= 1e-12, "<= 1e-12"


# -- 10-14: end-to-end -------------------------------------------------------

_E2E_CACHE: dict = {}


def e2e_config(seed, variant="full", outer_iters=5):
    return DmhConfig(
        cle=CleParams(d=E2E_CLE_D),
        gbe=GbeParams(),
        dam=DamParams(**E2E_DAM),
        c=E2E_BITS,
        outer_iters=outer_iters,
        outer_tol=0.0,  # always run every outer iteration so 4 -> 5 is observable
        variant=variant,
        seed=seed,
        hidden_dims1=E2E_HIDDEN,
        hidden_dims2=E2E_HIDDEN,
    )


def e2e_data(seed):
    ds = generate_synthetic(SyntheticConfig(seed=seed, **E2E_DATA))
    return split_query_retrieval(ds, E2E_QUERIES, seed)


def e2e_run(seed, pairing_ratio, variant="full"):
    """Train, evaluate both cross-modal directions, and memoise the outcome."""
    key = (int(seed), float(pairing_ratio), variant)
    if key in _E2E_CACHE:
        return _E2E_CACHE[key]
    query, db = e2e_data(seed)
    split = make_semi_paired(db, pairing_ratio, seed)
    t0 = time.perf_counter()
    model = train_dmh(db.X1, db.X2, split, e2e_config(seed, variant))
    seconds = time.perf_counter() - t0
    oracle = RelevanceOracle(query.labels, db.labels)
    i2t = mean_average_precision(model.encode(query.X1, 1), model.encode(db.X2, 2), oracle)
    t2i = mean_average_precision(model.encode(query.X2, 2), model.encode(db.X1, 1), oracle)
    out = {"i2t": i2t, "t2i": t2i, "map": 0.5 * (i2t + t2i), "seconds": seconds, "log": model.log}
    _E2E_CACHE[key] = out
    return out


def clear_cache():
    _E2E_CACHE.clear()


def _mean_map(seeds, ratio, variant="full"):
    return float(np.mean([e2e_run(s, ratio, variant)["map"] for s in seeds]))


def criterion_10(seeds=DEFAULT_SEEDS):
    runs = [e2e_run(s, 0.5) for s in seeds]
    m = float(np.mean([r["map"] for r in runs]))
    slowest = max(r["seconds"] for r in runs)
    ok = m >= 0.50 and slowest < 300
    return m, ok, ">= 0.50 (and < 300 s per seed)", f"slowest seed {slowest:.1f}s"


def criterion_11(seeds=DEFAULT_SEEDS):
    lo, hi = _mean_map(seeds, 0.1), _mean_map(seeds, 0.9)
    return hi - lo, hi - lo >= 0.02, ">= 0.02", f"MAP@0.1 {lo:.4f}, MAP@0.9 {hi:.4f}"


def criterion_12(seeds=DEFAULT_SEEDS):
    full = _mean_map(seeds, 0.5)
    others = {v: _mean_map(seeds, 0.5, v) for v in ("zero", "pca", "fix")}
    margin = min(full - m + 0.01 for m in others.values())
    detail = f"FULL {full:.4f}, " + ", ".join(f"{v.upper()} {m:.4f}" for v, m in others.items())
    return margin, margin >= 0, ">= 0 (FULL - variant + 0.01 for every variant)", detail


def criterion_13(seeds=DEFAULT_SEEDS):
    changes = []
    for s in seeds:
        log = e2e_run(s, 0.5)["log"]
        t4, t5 = log[3]["total"], log[4]["total"]
        changes.append(abs(t5 - t4) / abs(t4))
    worst = float(max(changes))
    detail = "per seed " + ", ".join(f"{c:.4f}" for c in changes)
    return worst, worst < 0.01, "< 0.01 (every seed)", detail


def criterion_14(seed=0):
    from . import cli

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        data = tmp / "data"
        if cli.main(["generate", "--out", str(data), "--seed", str(seed), "--n-total", "300"]) != 0:
            return 0, False, "byte-identical model files", "generate failed"
        outs = []
        for name in ("a", "b"):
            out = tmp / name
            rc = cli.main(["train", str(data), "--out", str(out), "--seed", str(seed), "--pairing-ratio", "0.5",
                           "--hidden", "32,16", "--epochs", "20", "--outer-iters", "2", "--d", "8"])
            if rc != 0:
                return 0, False, "byte-identical model files", f"train exited with {rc}"
            outs.append((out / "model.dmh").read_bytes())
    same = outs[0] == outs[1]
    return int(same), same, "byte-identical model files", f"{len(outs[0])} bytes"


CRITERIA = {
    1: ("GBE gradient vs finite differences", criterion_1, False),
    2: ("DAM backprop vs finite differences", criterion_2, False),
    3: ("neighbour weights vs constrained least squares", criterion_3, False),
    4: ("projection orthonormality during training", criterion_4, True),
    5: ("embedding row update is stationary", criterion_5, False),
    6: ("embedding recovers noiseless model-class data", criterion_6, False),
    7: ("similarity distributions valid, KL >= 0", criterion_7, False),
    8: ("popcount Hamming equals quarter squared distance", criterion_8, False),
    9: ("retrieval metrics vs brute force", criterion_9, False),
    10: ("cross-modal MAP at 50% pairing", criterion_10, True),
    11: ("MAP gain from 10% to 90% pairing", criterion_11, True),
    12: ("FULL dominates ZERO, PCA and FIX", criterion_12, True),
    13: ("outer objective change, iteration 4 to 5", criterion_13, True),
    14: ("seeded training is byte-deterministic", criterion_14, False),
}


def run_criterion(number, seeds=DEFAULT_SEEDS) -> CriterionResult:
    name, fn, multi_seed = CRITERIA[number]
    t0 = time.perf_counter()
    out = fn(tuple(seeds)) if multi_seed else fn(int(seeds[0]))
    measured, ok, required = out[:3]
    detail = out[3] if len(out) > 3 else ""
    seconds = time.perf_counter() - t0
    # runtime budgets stated alongside the oracle checks
    budget = {1: 5.0, 2: 10.0}.get(number)
    if budget is not None and seconds >= budget:
        ok = False
        detail = (detail + "; " if detail else "") + f"over the {budget:.0f}s budget"
    return CriterionResult(number, name, bool(ok), measured, required, seconds, detail)


def run_all(seeds=DEFAULT_SEEDS, numbers=None, echo=print):
    results = []
    for num in numbers or sorted(CRITERIA):
        res = run_criterion(num, seeds)
        if echo:
            echo(res.line())
        results.append(res)
    return results
