"""Modality encoders regressing hash codes (rectifier hidden layers, tanh output).

Parameters are plain lists of ``(W, b)`` pairs with ``W`` of shape
``(fan_in, fan_out)``; training is full-precision numpy backprop with plain
mini-batch SGD on the summed squared error. Each encoder also carries a fixed
input affine map ``(x - shift) / scale``, identity unless fitted by
:func:`fit_input_map`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import SemiPairedSplit
from .errors import ConfigurationError, NumericError, ShapeError
from .gbe import binarize

log = logging.getLogger(__name__)

PLATEAU_TOL = 1e-4
PLATEAU_EPOCHS = 3


@dataclass(frozen=True)
class EncoderArch:
    input_dim: int
    code_dim: int
    hidden_dims: tuple = (1024, 512)
    feature_layer: int = -1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.code_dim < 1:
            raise ConfigurationError("input_dim and code_dim must be positive")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ConfigurationError("an encoder needs at least one positive hidden layer")
        if not -len(self.hidden_dims) <= self.feature_layer < len(self.hidden_dims):
            raise ConfigurationError(
                f"feature_layer={self.feature_layer} out of range for {len(self.hidden_dims)} hidden layers"
            )

    @property
    def feature_index(self) -> int:
        return self.feature_layer % len(self.hidden_dims)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[self.feature_index]

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.code_dim)

    def to_json(self):
        return {
            "input_dim": self.input_dim,
            "code_dim": self.code_dim,
            "hidden_dims": list(self.hidden_dims),
            "feature_layer": self.feature_layer,
        }

    @classmethod
    def from_json(cls, d):
        return cls(d["input_dim"], d["code_dim"], tuple(d["hidden_dims"]), d["feature_layer"])


@dataclass
class EncoderParams:
    arch: EncoderArch
    layers: list
    shift: np.ndarray = None
    scale: np.ndarray = None

    def __post_init__(self):
        d = self.arch.input_dim
        self.shift = np.zeros(d) if self.shift is None else np.asarray(self.shift, dtype=np.float64).reshape(d)
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, dtype=np.float64).reshape(d)

    def copy(self):
        return EncoderParams(self.arch, [(W.copy(), b.copy()) for W, b in self.layers],
                             self.shift.copy(), self.scale.copy())

    def round_to_float32(self):
        self.layers = [(_r32(W), _r32(b)) for W, b in self.layers]
        self.shift, self.scale = _r32(self.shift), _r32(self.scale)
        return self


def _r32(a):
    return a.astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class DamParams:
    lr1: float = 10 ** -4.5
    lr2: float = 10 ** -3.5
    batch_size: int = 128
    T1: int = 1
    T2: int = 1
    epochs: int = 50
    seed: int = 0
    standardize_inputs: bool = True

    def validate(self):
        if not (self.lr1 >= 0 and self.lr2 >= 0):
            raise ConfigurationError("learning rates must be nonnegative")
        if self.batch_size < 1 or self.T1 < 1 or self.T2 < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size, T1, T2 must be positive and epochs nonnegative")


def init_encoder(arch: EncoderArch, seed=0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        layers.append((W, np.zeros(fan_out)))
    return EncoderParams(arch, layers)


def fit_input_map(params: EncoderParams, X) -> EncoderParams:
    """Centre columns and divide by the RMS row norm, so inputs have unit mean squared norm.

    Raw features with norms in the tens saturate the tanh output of a freshly
    initialised net, and saturated units barely move under SGD.
    """
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    rms = float(np.sqrt(np.mean(np.sum((X - mu) ** 2, axis=1)))) if X.size else 0.0
    out = params.copy()
    out.shift = mu
    out.scale = np.full(X.shape[1], rms if rms > 0 else 1.0)
    return out


def _check_input(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ShapeError(
            f"encoder expects {params.arch.input_dim} input features, got shape {X.shape}"
        )
    return X


def _forward_cache(params, X):
    a = (X - params.shift) / params.scale
    acts = [a]
    last = len(params.layers) - 1
    for li, (W, b) in enumerate(params.layers):
        z = a @ W + b
        a = np.tanh(z) if li == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(params: EncoderParams, X):
    """Return ``(codes_approx, features)``; features are the designated hidden layer."""
    X = _check_input(params, X)
    acts = _forward_cache(params, X)
    return acts[-1], acts[1 + params.arch.feature_index]


def encode(params: EncoderParams, X):
    """Binary codes ``sign(f(x))`` with ``sign(0) = -1``; a single vector gives one row."""
    single = np.ndim(X) == 1
    codes = binarize(forward(params, X)[0])
    return codes[0] if single else codes


def batch_loss(params, X, H):
    out = forward(params, X)[0]
    return float(np.sum((out - H) ** 2))


def batch_gradients(params, X, H):
    """Gradients of ``sum ||f(x) - h||^2`` over the batch, one ``(dW, db)`` per layer."""
    acts = _forward_cache(params, X)
    out = acts[-1]
    delta = 2.0 * (out - H) * (1.0 - out**2)
    grads = []
    for li in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[li]
        a_prev = acts[li]
        gW = a_prev.T @ delta
        gb = delta.sum(axis=0)
        if not (np.isfinite(gW).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient in layer {li}")
        grads.append((gW, gb))
        if li:
            delta = (delta @ W.T) * (acts[li] > 0)
    return grads[::-1]


def train_step(params: EncoderParams, X_batch, H_batch, lr) -> EncoderParams:
    X_batch = _check_input(params, X_batch)
    H_batch = np.asarray(H_batch, dtype=np.float64)
    if X_batch.shape[0] == 0:
        raise ShapeError("empty batch")
    if H_batch.shape != (X_batch.shape[0], params.arch.code_dim):
        raise ShapeError(f"targets have shape {H_batch.shape}, expected ({X_batch.shape[0]}, {params.arch.code_dim})")
    grads = batch_gradients(params, X_batch, H_batch)
    layers = [(W - lr * gW, b - lr * gb) for (W, b), (gW, gb) in zip(params.layers, grads)]
    return EncoderParams(params.arch, layers, params.shift, params.scale)


def dam_loss(codes1, codes2, H, split: SemiPairedSplit):
    """Squared error of each encoder against the codes of the objects its modality observes."""
    H = np.asarray(H, dtype=np.float64)
    T1, T2 = H[split.has1], H[split.has2]
    if np.shape(codes1) != T1.shape or np.shape(codes2) != T2.shape:
        raise ShapeError(
            f"encoder outputs {np.shape(codes1)}/{np.shape(codes2)} do not match targets {T1.shape}/{T2.shape}"
        )
    return float(np.sum((codes1 - T1) ** 2) + np.sum((codes2 - T2) ** 2))


@dataclass
class DamResult:
    theta1: EncoderParams
    theta2: EncoderParams
    Z1: np.ndarray
    Z2: np.ndarray
    history: list = field(default_factory=list)
    loss: float = float("nan")


def _plateaued(history):
    # every one of the last PLATEAU_EPOCHS epoch-to-epoch changes must be small,
    # so a noisy loss crossing its earlier value does not count as a plateau
    if len(history) <= PLATEAU_EPOCHS:
        return False
    tail = history[-1 - PLATEAU_EPOCHS :]
    return all(abs(b - a) <= PLATEAU_TOL * max(abs(a), 1e-300) for a, b in zip(tail[:-1], tail[1:]))


def _epoch(params, X, T, lr, batch_size, rng):
    order = rng.permutation(X.shape[0])
    for s in range(0, X.shape[0], batch_size):
        rows = order[s : s + batch_size]
        params = train_step(params, X[rows], T[rows], lr)
    return params


def run_dam(X1, X2, H, split: SemiPairedSplit, params: DamParams, arch1: EncoderArch,
            arch2: EncoderArch, theta=None) -> DamResult:
    """Fit both encoders to ``H`` and return them with refreshed features.

    ``X1``/``X2`` hold observed rows in ``split.rows1``/``split.rows2`` order and
    ``H`` is object-ordered. ``theta`` warm-starts from earlier encoders.
    """
    params.validate()
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] != split.n:
        raise ShapeError(f"codes have {H.shape[0]} rows, split has {split.n} objects")
    T1, T2 = H[split.has1], H[split.has2]
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    if X1.shape[0] != T1.shape[0] or X2.shape[0] != T2.shape[0]:
        raise ShapeError("feature rows are not aligned with the split")
    if theta is None:
        th1 = init_encoder(arch1, params.seed)
        th2 = init_encoder(arch2, params.seed + 1)
        if params.standardize_inputs:
            th1, th2 = fit_input_map(th1, X1), fit_input_map(th2, X2)
    else:
        th1, th2 = theta[0].copy(), theta[1].copy()
    rng = np.random.default_rng(params.seed + 2)

    def loss():
        return dam_loss(forward(th1, X1)[0], forward(th2, X2)[0], H, split)

    history = [loss()]
    for epoch in range(params.epochs):
        for _ in range(params.T1):
            th1 = _epoch(th1, X1, T1, params.lr1, params.batch_size, rng)
        for _ in range(params.T2):
            th2 = _epoch(th2, X2, T2, params.lr2, params.batch_size, rng)
        cur = loss()
        if not np.isfinite(cur):
            raise NumericError(f"DAM loss became non-finite at epoch {epoch + 1}")
        history.append(cur)
        if _plateaued(history):
            break
    Z1 = forward(th1, X1)[1]
    Z2 = forward(th2, X2)[1]
    return DamResult(th1, th2, Z1, Z2, history, history[-1])
