"""Global binary embedding: relaxed codes whose Student-t pair distribution matches Y's.

The loss is ``KL(S_Y || S_H(Hhat)) + gamma * sum_i ||hhat_i - sign(hhat_i)||^2``
where ``S_Y`` normalises positive inner products of the embedding and ``S_H``
normalises ``1 / (1 + D)`` with ``D(a, b) = ||a - b||^2 / 4``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, DegenerateDistributionError, NumericError

log = logging.getLogger(__name__)

SIM_EPS = 1e-12
INIT_STD = 0.1
MAX_HALVINGS = 20


@dataclass(frozen=True)
class GbeParams:
    gamma: float = 0.01
    learning_rate: float = 3000.0
    max_iters: int = 200
    tol: float = 1e-4
    seed: int = 0
    batch_size: int | None = None
    per_object_quantization: bool = True

    def effective_gamma(self, n):
        """Weight handed to the loss: ``gamma / n`` when quantization is averaged per object."""
        return self.gamma / n if self.per_object_quantization else self.gamma

    def validate(self):
        if self.gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.max_iters < 1 or not self.tol > 0:
            raise ConfigurationError("max_iters and tol must be positive")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2")


@dataclass
class CodeMatrices:
    Hhat: np.ndarray
    H: np.ndarray
    history: list = field(default_factory=list)

    @property
    def c(self) -> int:
        return self.H.shape[1]


def binarize(Hhat):
    """Elementwise sign with ``sign(x <= 0) = -1``."""
    return np.where(np.asarray(Hhat) > 0, 1.0, -1.0)


def similarity_from_embedding(Y):
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0]
    if n < 2:
        raise ConfigurationError("similarity needs at least two rows")
    G = Y @ Y.T
    off = ~np.eye(n, dtype=bool)
    if not (G[off] > 0).any():
        raise DegenerateDistributionError(
            "all pairwise inner products are <= 0; the embedding defines no distribution"
        )
    S = np.maximum(G, SIM_EPS)
    np.fill_diagonal(S, 0.0)
    return S / S.sum()


def similarity_from_codes(Hhat):
    Hhat = np.asarray(Hhat, dtype=np.float64)
    n = Hhat.shape[0]
    if n < 2:
        raise ConfigurationError("similarity needs at least two rows")
    sq = np.einsum("ij,ij->i", Hhat, Hhat)
    D = 0.25 * np.maximum(sq[:, None] + sq[None, :] - 2.0 * Hhat @ Hhat.T, 0.0)
    K = 1.0 / (1.0 + D)
    np.fill_diagonal(K, 0.0)
    return K / K.sum()


def gbe_loss(S_Y, Hhat, gamma):
    loss, _ = kernels.gbe_loss_grad(
        np.ascontiguousarray(S_Y, dtype=np.float64),
        np.ascontiguousarray(Hhat, dtype=np.float64), float(gamma), False,
    )
    return loss


def gbe_gradient(S_Y, Hhat, gamma):
    """Exact gradient of :func:`gbe_loss`; the sign target is held constant."""
    _, grad = kernels.gbe_loss_grad(
        np.ascontiguousarray(S_Y, dtype=np.float64),
        np.ascontiguousarray(Hhat, dtype=np.float64), float(gamma), True,
    )
    return grad


def init_codes(n, c, seed, row_ids=None):
    """Gaussian(0, 0.1) start; row ``i`` draws from a stream keyed by ``row_ids[i]``."""
    ids = np.arange(n) if row_ids is None else np.asarray(row_ids)
    out = np.empty((n, c))
    for i, rid in enumerate(ids):
        out[i] = np.random.default_rng([int(seed), int(rid)]).normal(0.0, INIT_STD, c)
    return out


def run_gbe(Y, params: GbeParams, c: int, row_ids=None, S_Y=None, init=None) -> CodeMatrices:
    """Gradient descent on the relaxed codes, halving the step on any loss increase.

    ``init`` replaces the Gaussian start (used to carry codes across outer iterations).
    """
    params.validate()
    if c < 1:
        raise ConfigurationError("bit length c must be positive")
    Y = np.asarray(Y, dtype=np.float64)
    if not np.isfinite(Y).all():
        raise NumericError("embedding contains non-finite values")
    P = similarity_from_embedding(Y) if S_Y is None else np.ascontiguousarray(S_Y)
    n = P.shape[0]
    if init is None:
        H = init_codes(n, c, params.seed, row_ids)
    else:
        H = np.array(init, dtype=np.float64)
        if H.shape != (n, c):
            raise ConfigurationError(f"initial codes have shape {H.shape}, expected {(n, c)}")
    if params.batch_size is not None and params.batch_size < n:
        return _run_gbe_batched(P, H, params)

    gamma = params.effective_gamma(n)
    ent = kernels.plogp_sum(P)
    loss, grad = kernels.gbe_loss_grad(P, H, gamma, True, ent)
    history = [loss]
    for it in range(params.max_iters):
        lr = params.learning_rate
        for _ in range(MAX_HALVINGS + 1):
            trial = H - lr * grad
            new_loss, _ = kernels.gbe_loss_grad(P, trial, gamma, False, ent)
            if not np.isfinite(new_loss):
                raise NumericError(f"GBE loss became non-finite at iteration {it + 1}")
            if new_loss <= loss:
                break
            lr *= 0.5
        else:
            log.debug("GBE: no descent step after %d halvings at iteration %d", MAX_HALVINGS, it + 1)
            history.append(loss)
            break
        change = abs(loss - new_loss) / max(abs(loss), 1e-300)
        H, loss = trial, new_loss
        _, grad = kernels.gbe_loss_grad(P, H, gamma, True, ent)
        history.append(loss)
        if change < params.tol:
            break
    return CodeMatrices(H, binarize(H), history)


def _run_gbe_batched(P, H, params):
    # Stochastic variant: each step touches a random row block with its own
    # renormalised similarity sub-distribution.
    rng = np.random.default_rng(params.seed)
    n = H.shape[0]
    history = []
    for it in range(params.max_iters):
        rows = np.sort(rng.choice(n, params.batch_size, replace=False))
        Pb = np.ascontiguousarray(P[np.ix_(rows, rows)])
        tot = Pb.sum()
        if tot <= 0:
            continue
        Pb /= tot
        Hb = np.ascontiguousarray(H[rows])
        loss, grad = kernels.gbe_loss_grad(Pb, Hb, params.effective_gamma(len(rows)), True)
        if not np.isfinite(loss):
            raise NumericError(f"GBE loss became non-finite at iteration {it + 1}")
        H[rows] = Hb - params.learning_rate * grad
        history.append(loss)
    return CodeMatrices(H, binarize(H), history)
