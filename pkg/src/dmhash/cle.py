"""Complemented local embedding.

Learns a shared low-dimensional embedding ``Y`` for both modalities with
orthonormal projections ``Q1``, ``Q2``, LLE-style reconstruction weights ``W``
over k neighbours, and fills in the missing description of every unpaired
object from its paired neighbours.

Objects are ordered ``(paired, only1, only2)`` throughout; ``neighbors[i]``
indexes into that order.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import kernels
from .data import SemiPairedSplit
from .errors import ConfigurationError, InvariantViolation, NumericError, ShapeError

log = logging.getLogger(__name__)

ORTH_TOL = 1e-8
_WEIGHT_EPS = 1e-3
_COND_MAX = 1e12


class CleWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CleParams:
    lam: float = 0.1
    eta: float = 0.01
    k: int = 3
    d: int = 512
    max_iters: int = 50
    tol: float = 1e-4
    strict: bool = False

    def validate(self):
        if self.lam < 0 or self.eta < 0:
            raise ConfigurationError("lam and eta must be nonnegative")
        if self.k < 1 or self.d < 1 or self.max_iters < 1:
            raise ConfigurationError("k, d and max_iters must be positive")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")


@dataclass
class ManifoldState:
    Y: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    W: np.ndarray
    neighbors: np.ndarray
    Zbar1: np.ndarray
    Zbar2: np.ndarray
    history: list = field(default_factory=list)
    max_orth_error: float = 0.0

    @property
    def n_sweeps(self) -> int:
        return len(self.history)


def _rank_order(D):
    order = np.argsort(D, axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(D.shape[0])[:, None]
    rank[rows, order] = np.arange(D.shape[1])[None, :]
    return order, rank


def knn(queries, pool, k):
    """Indices of the ``k`` nearest pool rows per query, nearest first; ties by index."""
    if pool.shape[0] < k:
        raise ConfigurationError(f"need at least k={k} candidate rows, got {pool.shape[0]}")
    D = cdist(queries, pool, "sqeuclidean")
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def select_paired_neighbors(Z1p, Z2p, k):
    """k neighbours per paired object drawn from both modalities' kNN lists.

    The candidate list length grows k, 2k, 4k, ... up to n_m - 1 until the two
    lists share at least k members; among the shared ones the k with the
    smallest summed rank are kept (ties by index).
    """
    Z1p = np.asarray(Z1p, dtype=np.float64)
    Z2p = np.asarray(Z2p, dtype=np.float64)
    n_m = Z1p.shape[0]
    if Z2p.shape[0] != n_m:
        raise ShapeError("paired descriptions must have the same row count in both modalities")
    if n_m <= k:
        raise ConfigurationError(f"{n_m} paired objects cannot supply k={k} neighbours; need k+1")
    D1 = cdist(Z1p, Z1p, "sqeuclidean")
    D2 = cdist(Z2p, Z2p, "sqeuclidean")
    np.fill_diagonal(D1, np.inf)
    np.fill_diagonal(D2, np.inf)
    _, rank1 = _rank_order(D1)
    _, rank2 = _rank_order(D2)
    out = np.empty((n_m, k), dtype=np.int64)
    for i in range(n_m):
        m = k
        while True:
            shared = np.flatnonzero((rank1[i] < m) & (rank2[i] < m))
            if shared.size >= k or m >= n_m - 1:
                break
            m = min(2 * m, n_m - 1)
        score = rank1[i, shared] + rank2[i, shared]
        out[i] = shared[np.lexsort((shared, score))[:k]]
    return out


def select_unpaired_neighbors(Zu, Zp, k):
    """Plain Euclidean kNN of unpaired descriptions among paired ones."""
    Zu = np.asarray(Zu, dtype=np.float64).reshape(-1, np.shape(Zp)[1])
    return knn(Zu, np.asarray(Zp, dtype=np.float64), k)


def _solve_weights(A):
    k = A.shape[-1]
    A = np.array(A, dtype=np.float64)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(A)
    bad = ~np.isfinite(cond) | (cond > _COND_MAX)
    if bad.any():
        tr = np.trace(A[bad], axis1=-2, axis2=-1)
        A[bad] += (_WEIGHT_EPS * tr / k)[:, None, None] * np.eye(k)
    ones = np.ones(A.shape[:-1] + (1,))
    W = np.empty(A.shape[:-1])
    # All neighbours coincide with the centre: A is zero, every mixture is exact.
    degenerate = np.trace(A, axis1=-2, axis2=-1) <= 0
    W[degenerate] = 1.0 / k
    ok = ~degenerate
    if ok.any():
        W[ok] = np.linalg.solve(A[ok], ones[ok])[..., 0]
    s = W.sum(axis=-1, keepdims=True)
    W = W / s
    if not np.isfinite(W).all():
        raise NumericError("reconstruction weights are not finite")
    return W


def update_weights(center, neighbor_points):
    """Sum-to-one weights reconstructing ``center`` from ``neighbor_points`` (k x d).

    Solves ``A w = 1`` with ``A = B^T B``, ``B = [center - neighbour_j]``, then
    normalises; ill-conditioned ``A`` gets a trace-scaled ridge first.
    """
    center = np.asarray(center, dtype=np.float64)
    nb = np.atleast_2d(np.asarray(neighbor_points, dtype=np.float64))
    if not (np.isfinite(center).all() and np.isfinite(nb).all()):
        raise NumericError("update_weights received non-finite inputs")
    if nb.shape[1] != center.shape[0]:
        raise ShapeError("neighbour points must have the centre's dimension")
    return update_weights_batch(center[None, :], nb[None, :, :])[0]


def update_weights_batch(centers, neighbor_points):
    """Row-wise :func:`update_weights` for ``centers`` (n x d), ``neighbor_points`` (n x k x d)."""
    if not (np.isfinite(centers).all() and np.isfinite(neighbor_points).all()):
        raise NumericError("update_weights received non-finite inputs")
    B = centers[:, None, :] - neighbor_points
    A = B @ B.transpose(0, 2, 1)
    return _solve_weights(A)


def complement_features(Z1, Z2, split: SemiPairedSplit, W, neighbors, zero=False):
    """Fill missing descriptions from paired neighbours.

    ``Z1``/``Z2`` are object-ordered (n rows; rows for missing descriptions are
    ignored). Observed rows are copied; missing rows become ``sum_j W_ij z_j``
    over the (paired) neighbours, or zeros when ``zero`` is set.
    """
    n_m = split.n_m
    has1, has2 = split.has1, split.has2
    Zbar1 = np.array(Z1, dtype=np.float64, copy=True)
    Zbar2 = np.array(Z2, dtype=np.float64, copy=True)
    for Zbar, has in ((Zbar1, has1), (Zbar2, has2)):
        miss = np.flatnonzero(~has)
        if miss.size == 0:
            continue
        if zero:
            Zbar[miss] = 0.0
            continue
        nb = neighbors[miss]
        if (nb >= n_m).any() or (nb < 0).any():
            raise InvariantViolation("complemented row references a non-paired neighbour")
        Zbar[miss] = np.einsum("ik,ikd->id", W[miss], Zbar[nb])
    return Zbar1, Zbar2


def orthogonalize(M):
    """Nearest column-orthonormal matrix (polar factor ``U V^T`` of the thin SVD)."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape[0] < M.shape[1]:
        raise ConfigurationError(
            f"cannot orthogonalize a {M.shape[0]}x{M.shape[1]} matrix: more columns than rows"
        )
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size and s[-1] <= s[0] * M.shape[0] * np.finfo(float).eps:
        warnings.warn("orthogonalize: rank-deficient input, null directions filled from the SVD basis", CleWarning, stacklevel=2)
    return U @ Vt


def orthogonality_error(Q):
    return float(np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1])))


def update_projection(Zbar, Y):
    """Least-squares projection ``(sum z y^T)(sum y y^T)^-1``, then orthogonalized."""
    Zbar = np.asarray(Zbar, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    d = Y.shape[1]
    if d > Zbar.shape[1]:
        raise ConfigurationError(
            f"embedding dim d={d} exceeds feature dim {Zbar.shape[1]}; no orthonormal frame exists"
        )
    G = Y.T @ Y
    if np.linalg.matrix_rank(G) < d:
        G = G + 1e-10 * np.eye(d)
    M = np.linalg.solve(G, (Zbar.T @ Y).T).T
    return orthogonalize(M)


def update_embedding_row(zbar1, zbar2, Q1, Q2, W_i, neighbor_Y, lam, eta, n):
    """Stationary point of the per-row objective for ``y_i`` (left linear solve)."""
    d = Q1.shape[1]
    A = Q1.T @ Q1 + Q2.T @ Q2 + 2.0 * (lam + eta * n) * np.eye(d)
    b = Q1.T @ zbar1 + Q2.T @ zbar2
    if len(W_i):
        b = b + 2.0 * lam * (np.asarray(W_i) @ np.atleast_2d(neighbor_Y))
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"embedding row system is singular: {exc}") from None


def row_objective(y, zbar1, zbar2, Q1, Q2, W_i, neighbor_Y, lam, eta, n):
    """Terms of the objective that involve ``y_i`` when its neighbours are held fixed."""
    y = np.asarray(y, dtype=np.float64)
    val = 0.5 * (np.sum((zbar1 - Q1 @ y) ** 2) + np.sum((zbar2 - Q2 @ y) ** 2))
    if len(W_i):
        val += lam * np.sum((y - np.asarray(W_i) @ np.atleast_2d(neighbor_Y)) ** 2)
    return float(val + eta * n * np.sum(y**2))


def update_embedding(Y, Zbar1, Zbar2, Q1, Q2, W, neighbors, lam, eta):
    """One Gauss-Seidel sweep over the rows of ``Y`` (in place).

    Relies on ``Q^T Q = I`` so each row solve is a scalar division.
    """
    n = Y.shape[0]
    base = np.ascontiguousarray(Zbar1 @ Q1 + Zbar2 @ Q2)
    denom = 2.0 + 2.0 * (lam + eta * n)
    kernels.gauss_seidel_sweep(
        Y, base, np.ascontiguousarray(neighbors, dtype=np.int64),
        np.ascontiguousarray(W, dtype=np.float64), 2.0 * lam, denom,
    )
    return Y


def objective_terms(Y, Zbar1, Zbar2, Q1, Q2, W, neighbors, lam, eta):
    n = Y.shape[0]
    recon = (np.sum((Zbar1 - Y @ Q1.T) ** 2) + np.sum((Zbar2 - Y @ Q2.T) ** 2)) / (2.0 * n)
    resid = Y - np.einsum("ik,ikd->id", W, Y[neighbors])
    local = lam / n * np.sum(resid**2)
    reg = eta * np.sum(Y**2)
    return float(recon), float(local), float(reg)


def cle_objective(state: ManifoldState, params: CleParams) -> float:
    return sum(
        objective_terms(state.Y, state.Zbar1, state.Zbar2, state.Q1, state.Q2,
                        state.W, state.neighbors, params.lam, params.eta)
    )


def build_neighbors(Z1, Z2, split: SemiPairedSplit, k):
    """Neighbour table (n x k, object order) plus the fixed feature-space weights of unpaired rows.

    ``Z1`` and ``Z2`` hold observed rows only, ordered like ``split.rows1`` and
    ``split.rows2``.
    """
    n_m, n_1, n_2 = split.n_m, split.n_1, split.n_2
    nb = np.empty((split.n, k), dtype=np.int64)
    Wu = np.empty((split.n, k))
    nb[:n_m] = select_paired_neighbors(Z1[:n_m], Z2[:n_m], k)
    if n_1:
        rows = select_unpaired_neighbors(Z1[n_m:], Z1[:n_m], k)
        nb[n_m : n_m + n_1] = rows
        Wu[n_m : n_m + n_1] = update_weights_batch(Z1[n_m:], Z1[:n_m][rows])
    if n_2:
        rows = select_unpaired_neighbors(Z2[n_m:], Z2[:n_m], k)
        nb[n_m + n_1 :] = rows
        Wu[n_m + n_1 :] = update_weights_batch(Z2[n_m:], Z2[:n_m][rows])
    return nb, Wu


def _object_ordered(Z1, Z2, split):
    n, n_m, n_1 = split.n, split.n_m, split.n_1
    if Z1.shape[0] != n_m + n_1 or Z2.shape[0] != n_m + split.n_2:
        raise ShapeError(
            f"expected {n_m + n_1} modality-1 and {n_m + split.n_2} modality-2 rows, "
            f"got {Z1.shape[0]} and {Z2.shape[0]}"
        )
    F1 = np.zeros((n, Z1.shape[1]))
    F2 = np.zeros((n, Z2.shape[1]))
    F1[split.has1] = Z1
    F2[split.has2] = Z2
    return F1, F2


def run_cle(Z1, Z2, split: SemiPairedSplit, params: CleParams, seed=0, zero_complement=False,
            neighbors=None, on_projection=None) -> ManifoldState:
    """Alternate Q, W, complement and Y updates until the objective settles.

    ``Z1``/``Z2`` hold observed descriptions in ``split.rows1``/``split.rows2``
    order. ``on_projection(Q)`` is called after every Q update.
    """
    params.validate()
    Z1 = np.asarray(Z1, dtype=np.float64)
    Z2 = np.asarray(Z2, dtype=np.float64)
    d, k, n = params.d, params.k, split.n
    if d > min(Z1.shape[1], Z2.shape[1]):
        raise ConfigurationError(
            f"embedding dim d={d} exceeds feature dims ({Z1.shape[1]}, {Z2.shape[1]})"
        )
    if split.n_m <= k:
        raise ConfigurationError(f"need at least k+1={k + 1} paired objects, got {split.n_m}")
    F1, F2 = _object_ordered(Z1, Z2, split)
    if neighbors is None:
        nb, W_unpaired = build_neighbors(Z1, Z2, split, k)
    else:
        nb, W_unpaired = neighbors
    n_m = split.n_m

    rng = np.random.default_rng(seed)
    Q1 = orthogonalize(rng.standard_normal((F1.shape[1], d)))
    Q2 = orthogonalize(rng.standard_normal((F2.shape[1], d)))
    Y = 0.01 * rng.standard_normal((n, d))
    W = np.full((n, k), 1.0 / k)
    Zbar1 = np.where(split.has1[:, None], F1, 0.0)
    Zbar2 = np.where(split.has2[:, None], F2, 0.0)
    state = ManifoldState(Y, Q1, Q2, W, nb, Zbar1, Zbar2)

    def check(Q):
        err = orthogonality_error(Q)
        state.max_orth_error = max(state.max_orth_error, err)
        if err > ORTH_TOL:
            raise InvariantViolation(f"projection lost orthonormality: ||Q^T Q - I|| = {err:.3e}")
        if on_projection is not None:
            on_projection(Q)

    prev = cle_objective(state, params)
    # Round-off floor: relative slack alone is meaningless once the objective hits ~1e-30.
    slack = 1e-12 * (1.0 + (np.sum(F1**2) + np.sum(F2**2)) / (2.0 * n))
    for sweep in range(params.max_iters):
        state.Q1 = update_projection(state.Zbar1, state.Y)
        check(state.Q1)
        state.Q2 = update_projection(state.Zbar2, state.Y)
        check(state.Q2)

        state.W[:n_m] = update_weights_batch(state.Y[:n_m], state.Y[nb[:n_m]])
        state.W[n_m:] = W_unpaired[n_m:]

        state.Zbar1, state.Zbar2 = complement_features(
            F1, F2, split, state.W, nb, zero=zero_complement
        )
        update_embedding(state.Y, state.Zbar1, state.Zbar2, state.Q1, state.Q2,
                         state.W, nb, params.lam, params.eta)
        obj = cle_objective(state, params)
        if not np.isfinite(obj):
            raise NumericError(f"CLE objective became non-finite at sweep {sweep + 1}")
        # zero-filled complements do not minimise the objective, so no descent guard there
        if sweep > 0 and not zero_complement and obj > prev + 1e-6 * abs(prev) + slack:
            msg = f"CLE objective increased at sweep {sweep + 1}: {prev:.9g} -> {obj:.9g}"
            if params.strict:
                raise InvariantViolation(msg)
            warnings.warn(msg, CleWarning, stacklevel=2)
        state.history.append(obj)
        change = abs(prev - obj) / max(abs(prev), 1e-300)
        prev = obj
        if change < params.tol:
            break
    log.debug("CLE finished after %d sweeps, objective %.6g", state.n_sweeps, prev)
    return state
