"""Outer alternation of embedding, coding and encoder fitting, plus model files.

Each outer iteration runs :func:`~dmhash.cle.run_cle` on the current features,
turns the embedding into codes, fits both encoders to the codes and (except
for the ``fix`` variant) replaces the features with the encoders' feature
layer outputs.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cle import CleParams, cle_objective, orthogonality_error, run_cle
from .dam import DamParams, EncoderArch, EncoderParams, encode, forward, run_dam
from .data import SemiPairedSplit
from .errors import ConfigurationError, DataFormatError, DmhError, StageError
from .gbe import CodeMatrices, GbeParams, binarize, gbe_loss, run_gbe, similarity_from_embedding

log = logging.getLogger(__name__)

VARIANTS = ("full", "zero", "pca", "fix")
MODEL_MAGIC = b"DMHMODEL"
MODEL_VERSION = 1


@dataclass(frozen=True)
class DmhConfig:
    cle: CleParams = field(default_factory=CleParams)
    gbe: GbeParams = field(default_factory=GbeParams)
    dam: DamParams = field(default_factory=DamParams)
    c: int = 16
    outer_iters: int = 5
    outer_tol: float = 0.01
    variant: str = "full"
    seed: int = 0
    hidden_dims1: tuple = (1024, 512)
    hidden_dims2: tuple = (1024, 512)
    feature_layer: int = -1
    normalize_features: bool = True
    warm_start_codes: bool = True

    def __post_init__(self):
        object.__setattr__(self, "variant", str(self.variant).lower())
        object.__setattr__(self, "hidden_dims1", tuple(self.hidden_dims1))
        object.__setattr__(self, "hidden_dims2", tuple(self.hidden_dims2))

    def validate(self, d1=None, d2=None):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.c < 1 or self.outer_iters < 1 or self.outer_tol < 0:
            raise ConfigurationError("c and outer_iters must be positive, outer_tol nonnegative")
        self.cle.validate()
        self.gbe.validate()
        self.dam.validate()
        dims = []
        if d1 is not None:
            dims += [d1, d2]
        if self.variant != "fix":
            for hd in (self.hidden_dims1, self.hidden_dims2):
                dims.append(hd[self.feature_layer % len(hd)])
        if dims and self.cle.d > min(dims):
            raise ConfigurationError(
                f"embedding dim d={self.cle.d} exceeds the smallest feature dim {min(dims)}"
            )

    def to_json(self):
        out = dataclasses.asdict(self)
        out["hidden_dims1"] = list(self.hidden_dims1)
        out["hidden_dims2"] = list(self.hidden_dims2)
        return out

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        sub = {"cle": CleParams, "gbe": GbeParams, "dam": DamParams}
        for key, kind in sub.items():
            if key in d:
                fields = {f.name for f in dataclasses.fields(kind)}
                bad = set(d[key]) - fields
                if bad:
                    raise ConfigurationError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = kind(**d[key])
        return cls(**d)


@dataclass
class DmhModel:
    theta1: EncoderParams
    theta2: EncoderParams
    c: int
    config: DmhConfig
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.theta1.arch.code_dim != self.c or self.theta2.arch.code_dim != self.c:
            raise ConfigurationError("encoder code_dim must equal the model bit length")

    def encode(self, X, modality):
        theta = self.theta1 if int(modality) == 1 else self.theta2
        return encode(theta, X)


@dataclass
class TrainingResult:
    model: DmhModel
    state: object
    codes: CodeMatrices
    Z1: np.ndarray
    Z2: np.ndarray


def pca_embed(Y, c) -> CodeMatrices:
    """Codes from the signs of the top-``c`` principal component scores."""
    Y = np.asarray(Y, dtype=np.float64)
    n, d = Y.shape
    if n <= c:
        raise ConfigurationError(f"PCA codes need more rows than bits (n={n}, c={c})")
    Yc = Y - Y.mean(axis=0)
    _, s, Vt = np.linalg.svd(Yc, full_matrices=False)
    rank = int(np.sum(s > s.max(initial=0.0) * max(n, d) * np.finfo(float).eps))
    # Deterministic orientation: largest-magnitude loading positive.
    pivots = np.argmax(np.abs(Vt), axis=1)
    Vt = Vt * np.sign(Vt[np.arange(Vt.shape[0]), pivots])[:, None]
    m = min(c, rank)
    scores = np.zeros((n, c))
    scores[:, :m] = Yc @ Vt[:m].T
    if m < c:
        warnings.warn(f"PCA codes: embedding rank {rank} < c={c}; {c - m} bits fixed at -1", stacklevel=2)
    return CodeMatrices(scores, binarize(scores), [])


def normalize_features(Z):
    """Center columns, then scale each row to unit length (zero rows stay zero)."""
    Z = np.asarray(Z, dtype=np.float64)
    Z = Z - Z.mean(axis=0)
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    return Z / np.where(norms > 0, norms, 1.0)


def _relchange(a, b):
    return abs(a - b) / max(abs(a), 1e-300)


def train_dmh(X1, X2, split: SemiPairedSplit, config: DmhConfig, initial_features=None,
              return_details=False):
    """Run the outer alternation; ``X1``/``X2`` are the full row-aligned training matrices.

    ``initial_features=(Z1, Z2)`` substitutes precomputed features (observed rows
    in ``split.rows1``/``split.rows2`` order) for the raw inputs.
    """
    X1 = np.asarray(X1, dtype=np.float64)
    X2 = np.asarray(X2, dtype=np.float64)
    config.validate(X1.shape[1], X2.shape[1])
    X1o, X2o = X1[split.rows1], X2[split.rows2]
    if initial_features is None:
        Z1, Z2 = X1o, X2o
    else:
        Z1, Z2 = (np.asarray(z, dtype=np.float64) for z in initial_features)
    Z1_start, Z2_start = Z1, Z2
    arch1 = EncoderArch(X1.shape[1], config.c, config.hidden_dims1, config.feature_layer)
    arch2 = EncoderArch(X2.shape[1], config.c, config.hidden_dims2, config.feature_layer)
    cle_p = config.cle
    gbe_p = dataclasses.replace(config.gbe, seed=config.seed)
    dam_p = dataclasses.replace(config.dam, seed=config.seed)
    variant = config.variant

    records = []
    theta = None
    state = codes = None
    for it in range(1, config.outer_iters + 1):
        max_orth = [0.0]

        def on_projection(Q):
            max_orth[0] = max(max_orth[0], orthogonality_error(Q))

        try:
            F1, F2 = (normalize_features(Z1), normalize_features(Z2)) if config.normalize_features else (Z1, Z2)
            state = run_cle(F1, F2, split, cle_p, seed=config.seed,
                            zero_complement=variant == "zero", on_projection=on_projection)
        except DmhError as exc:
            raise StageError("CLE", exc, it) from exc
        l1 = cle_objective(state, cle_p)
        try:
            S_Y = similarity_from_embedding(state.Y)
            if variant == "pca":
                codes = pca_embed(state.Y, config.c)
                gamma = gbe_p.effective_gamma(split.n)
                l2 = gbe_loss(S_Y, codes.H, gamma)
            else:
                prev = codes.Hhat if codes is not None and config.warm_start_codes else None
                codes = run_gbe(state.Y, gbe_p, config.c, S_Y=S_Y, init=prev)
                l2 = codes.history[-1]
        except DmhError as exc:
            raise StageError("GBE" if variant != "pca" else "PCA", exc, it) from exc
        try:
            dam = run_dam(X1o, X2o, codes.H, split, dam_p, arch1, arch2, theta=theta)
        except DmhError as exc:
            raise StageError("DAM", exc, it) from exc
        theta = (dam.theta1, dam.theta2)
        l3 = dam.loss
        rec = {
            "iteration": it,
            "variant": variant,
            "l1": l1,
            "l2": l2,
            "l3": l3,
            "total": l1 + l2 + l3,
            "n": split.n,
            "n_m": split.n_m,
            "n_1": split.n_1,
            "n_2": split.n_2,
            "cle_sweeps": state.n_sweeps,
            "gbe_iters": max(len(codes.history) - 1, 0),
            "dam_epochs": len(dam.history) - 1,
            "max_orth_error": max_orth[0],
        }
        if variant != "fix":
            Z1, Z2 = dam.Z1, dam.Z2
            rec["z_refresh"] = {"dim1": int(Z1.shape[1]), "dim2": int(Z2.shape[1])}
        records.append(rec)
        log.info("outer %d: l1=%.6g l2=%.6g l3=%.6g", it, l1, l2, l3)
        if it > 1 and config.outer_tol > 0:
            prev = records[-2]
            if all(_relchange(prev[k], rec[k]) < config.outer_tol for k in ("l1", "l2", "l3")):
                break

    th1 = theta[0].copy().round_to_float32()
    th2 = theta[1].copy().round_to_float32()
    model = DmhModel(th1, th2, config.c, config, records)
    if return_details:
        if variant == "fix":
            Z1, Z2 = Z1_start, Z2_start
        return TrainingResult(model, state, codes, Z1, Z2)
    return model


def train_variant(X1, X2, split, config: DmhConfig, **kw):
    if config.variant not in ("zero", "pca", "fix"):
        raise ConfigurationError(f"train_variant expects zero, pca or fix, got {config.variant!r}")
    return train_dmh(X1, X2, split, config, **kw)


def _encoder_blobs(theta: EncoderParams, prefix):
    out = []
    for i, (W, b) in enumerate(theta.layers):
        out.append((f"{prefix}.W{i}", W))
        out.append((f"{prefix}.b{i}", b))
    return out + [(f"{prefix}.shift", theta.shift), (f"{prefix}.scale", theta.scale)]


def model_to_bytes(model: DmhModel) -> bytes:
    blobs = _encoder_blobs(model.theta1, "theta1") + _encoder_blobs(model.theta2, "theta2")
    table, payload, offset = [], [], 0
    for name, arr in blobs:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    payload = b"".join(payload)
    header = {
        "format": "dmh-model",
        "version": MODEL_VERSION,
        "c": model.c,
        "arch1": model.theta1.arch.to_json(),
        "arch2": model.theta2.arch.to_json(),
        "config": model.config.to_json(),
        "log": model.log,
        "blobs": table,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MODEL_MAGIC + struct.pack("<IQ", MODEL_VERSION, len(hbytes)) + hbytes + payload


def model_from_bytes(raw: bytes) -> DmhModel:
    pre = len(MODEL_MAGIC) + 12
    if len(raw) < pre or raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise DataFormatError("not a model file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[len(MODEL_MAGIC) : pre])
    if version != MODEL_VERSION:
        raise DataFormatError(f"model format version {version} is not supported (expected {MODEL_VERSION})")
    if len(raw) < pre + hlen:
        raise DataFormatError("model file truncated inside the header")
    try:
        header = json.loads(raw[pre : pre + hlen])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"model header is not valid JSON ({exc})") from None
    payload = raw[pre + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise DataFormatError(
            f"model payload holds {len(payload)} bytes, header says {header.get('payload_bytes')}"
        )
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise DataFormatError("model payload checksum mismatch")
    arrays = {}
    for ent in header["blobs"]:
        chunk = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
        if len(chunk) != ent["nbytes"] or int(np.prod(ent["shape"])) * 4 != ent["nbytes"]:
            raise DataFormatError(f"blob {ent['name']} is corrupt")
        arrays[ent["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(ent["shape"]).astype(np.float64)

    def encoder(prefix, arch_json):
        arch = EncoderArch.from_json(arch_json)
        layers = []
        for i in range(len(arch.layer_dims) - 1):
            try:
                layers.append((arrays[f"{prefix}.W{i}"], arrays[f"{prefix}.b{i}"]))
            except KeyError:
                raise DataFormatError(f"missing blob for {prefix} layer {i}") from None
        try:
            return EncoderParams(arch, layers, arrays[f"{prefix}.shift"], arrays[f"{prefix}.scale"])
        except KeyError:
            raise DataFormatError(f"missing input map for {prefix}") from None
        except ValueError:
            raise DataFormatError(f"input map for {prefix} does not match input_dim") from None

    return DmhModel(
        encoder("theta1", header["arch1"]),
        encoder("theta2", header["arch2"]),
        header["c"],
        DmhConfig.from_json(header["config"]),
        header["log"],
    )


def save_model(model: DmhModel, path) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path) -> DmhModel:
    return model_from_bytes(Path(path).read_bytes())


def write_log(records, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def features(model: DmhModel, X, modality):
    theta = model.theta1 if int(modality) == 1 else model.theta2
    return forward(theta, X)[1]
