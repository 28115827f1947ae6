"""Datasets, semi-paired splits, the synthetic generator and the on-disk format.

A dataset directory holds::

    meta.json    n_total, d1, d2, label_dim, endianness, dtype
    X1.f32       row-major little-endian float32, n_total x d1
    X2.f32       row-major little-endian float32, n_total x d2
    labels.u8    optional, row-major 0/1 bytes, n_total x label_dim
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError, ShapeError

FORMAT_NAME = "dmh-dataset"
FORMAT_VERSION = 1


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultimodalDataset:
    """Two row-aligned feature matrices plus optional multi-hot labels.

    ``ids1``/``ids2`` record which generating object each row came from; they are
    bookkeeping for audits and are not persisted.
    """

    X1: np.ndarray
    X2: np.ndarray
    labels: np.ndarray | None = None
    ids1: np.ndarray | None = None
    ids2: np.ndarray | None = None

    def __post_init__(self):
        X1 = _frozen(self.X1)
        X2 = _frozen(self.X2)
        if X1.ndim != 2 or X2.ndim != 2:
            raise ShapeError("X1 and X2 must be 2-D matrices")
        if X1.shape[0] != X2.shape[0]:
            raise ShapeError(f"row count mismatch: X1 has {X1.shape[0]}, X2 has {X2.shape[0]}")
        if X1.shape[1] == 0 or X2.shape[1] == 0:
            raise ShapeError("feature dimensions must be positive")
        if not (np.isfinite(X1).all() and np.isfinite(X2).all()):
            raise ShapeError("features must be finite")
        object.__setattr__(self, "X1", X1)
        object.__setattr__(self, "X2", X2)
        if self.labels is not None:
            labels = _frozen(self.labels, np.uint8)
            if labels.ndim != 2 or labels.shape[0] != X1.shape[0]:
                raise ShapeError("labels must be an n_total x L matrix")
            if labels.max(initial=0) > 1:
                raise ShapeError("labels must be 0/1")
            object.__setattr__(self, "labels", labels)
        n = X1.shape[0]
        for name in ("ids1", "ids2"):
            ids = getattr(self, name)
            if ids is None:
                ids = np.arange(n)
            ids = _frozen(ids, np.int64)
            if ids.shape != (n,):
                raise ShapeError(f"{name} must have one entry per row")
            object.__setattr__(self, name, ids)

    @property
    def n_total(self) -> int:
        return self.X1.shape[0]

    @property
    def d1(self) -> int:
        return self.X1.shape[1]

    @property
    def d2(self) -> int:
        return self.X2.shape[1]

    @property
    def label_dim(self) -> int:
        return 0 if self.labels is None else self.labels.shape[1]

    def subset(self, rows) -> "MultimodalDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return MultimodalDataset(
            self.X1[rows],
            self.X2[rows],
            None if self.labels is None else self.labels[rows],
            self.ids1[rows],
            self.ids2[rows],
        )


@dataclass(frozen=True)
class SyntheticConfig:
    n_total: int = 1200
    d_latent: int = 8
    d1: int = 64
    d2: int = 64
    n_clusters: int = 4
    noise_sigma: float = 0.5
    seed: int = 0
    cluster_std: float = 1.0
    center_scale: float = 2.0

    def validate(self):
        for name in ("n_total", "d_latent", "d1", "d2", "n_clusters"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.d_latent > min(self.d1, self.d2):
            raise ConfigurationError(
                f"d_latent={self.d_latent} exceeds min(d1, d2)={min(self.d1, self.d2)}"
            )
        if self.n_clusters < 2:
            raise ConfigurationError("n_clusters must be at least 2")
        if self.n_total < self.n_clusters:
            raise ConfigurationError("n_total must be at least n_clusters")
        if self.noise_sigma < 0 or self.cluster_std < 0 or self.center_scale < 0:
            raise ConfigurationError("noise_sigma, cluster_std and center_scale must be >= 0")


@dataclass(frozen=True, eq=False)
class SyntheticDataset(MultimodalDataset):
    """Generator output, carrying the ground truth used by audit tests."""

    latent: np.ndarray | None = None
    P1: np.ndarray | None = None
    P2: np.ndarray | None = None
    cluster: np.ndarray | None = None


def _f32(a):
    return a.astype(np.float32).astype(np.float64)


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    """Gaussian clusters in a latent space, linearly projected into two modalities.

    Clusters are stratified evenly (sizes differ by at most one) and rows are
    shuffled. Outputs are rounded to float32 so they survive the file format.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, k = config.n_total, config.n_clusters
    centers = config.center_scale * rng.standard_normal((k, config.d_latent))
    cluster = rng.permutation(np.arange(n) % k)
    latent = centers[cluster] + config.cluster_std * rng.standard_normal((n, config.d_latent))
    P1 = rng.standard_normal((config.d_latent, config.d1)) / math.sqrt(config.d_latent)
    P2 = rng.standard_normal((config.d_latent, config.d2)) / math.sqrt(config.d_latent)
    X1 = latent @ P1 + config.noise_sigma * rng.standard_normal((n, config.d1))
    X2 = latent @ P2 + config.noise_sigma * rng.standard_normal((n, config.d2))
    labels = np.zeros((n, k), dtype=np.uint8)
    labels[np.arange(n), cluster] = 1
    return SyntheticDataset(
        _f32(X1), _f32(X2), labels, latent=latent, P1=P1, P2=P2, cluster=cluster
    )


@dataclass(frozen=True, eq=False)
class SemiPairedSplit:
    """Index sets into the training rows.

    Paired objects keep both descriptions; ``only1`` objects keep only their
    modality-1 row, ``only2`` only their modality-2 row. ``permutation`` is the
    shuffled order of the unpaired rows the split was drawn from.
    """

    paired: np.ndarray
    only1: np.ndarray
    only2: np.ndarray
    permutation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        for name in ("paired", "only1", "only2", "permutation"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.int64).reshape(-1))
        allidx = np.concatenate([self.paired, self.only1, self.only2])
        if np.unique(allidx).size != allidx.size:
            raise ConfigurationError("paired, only1 and only2 must be disjoint")

    @property
    def n_m(self) -> int:
        return self.paired.size

    @property
    def n_1(self) -> int:
        return self.only1.size

    @property
    def n_2(self) -> int:
        return self.only2.size

    @property
    def n(self) -> int:
        return self.n_m + self.n_1 + self.n_2

    @property
    def rows1(self) -> np.ndarray:
        """Dataset rows with a modality-1 description, in object order."""
        return np.concatenate([self.paired, self.only1])

    @property
    def rows2(self) -> np.ndarray:
        return np.concatenate([self.paired, self.only2])

    @property
    def has1(self) -> np.ndarray:
        """Mask over objects ordered (paired, only1, only2)."""
        m = np.zeros(self.n, dtype=bool)
        m[: self.n_m + self.n_1] = True
        return m

    @property
    def has2(self) -> np.ndarray:
        m = np.zeros(self.n, dtype=bool)
        m[: self.n_m] = True
        m[self.n_m + self.n_1 :] = True
        return m

    def to_json(self) -> dict:
        return {"n": self.n, "n_m": self.n_m, "n_1": self.n_1, "n_2": self.n_2}

    @classmethod
    def fully_paired(cls, n: int) -> "SemiPairedSplit":
        return cls(np.arange(n), np.zeros(0), np.zeros(0))


def make_semi_paired(
    dataset_or_n, pairing_ratio: float, seed: int = 0, k: int = 3, only1_fraction: float = 0.5
) -> SemiPairedSplit:
    """Keep ``floor(ratio * n)`` random objects paired, break the rest apart.

    The unpaired remainder goes ``only1_fraction`` to image-only (rounded up)
    and the rest to text-only.
    """
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else dataset_or_n.n_total
    if not 0.0 <= pairing_ratio <= 1.0:
        raise ConfigurationError(f"pairing_ratio must lie in [0, 1], got {pairing_ratio}")
    if not 0.0 <= only1_fraction <= 1.0:
        raise ConfigurationError("only1_fraction must lie in [0, 1]")
    n_m = math.floor(pairing_ratio * n + 1e-9)
    if n_m < k + 1:
        raise ConfigurationError(
            f"pairing leaves {n_m} paired objects; at least k+1={k + 1} are required"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    paired = np.sort(perm[:n_m])
    rest = perm[n_m:]
    n_1 = math.ceil(rest.size * only1_fraction)
    return SemiPairedSplit(paired, rest[:n_1], rest[n_1:], rest)


def apply_semi_pairing(dataset: MultimodalDataset, split: SemiPairedSplit) -> MultimodalDataset:
    """Return the dataset as a semi-paired learner would see it.

    Modality-2 rows of the unpaired portion are permuted among themselves, so
    row i of X1 and X2 only describe the same object for paired rows.
    """
    unpaired = np.sort(split.permutation)
    X2 = np.array(dataset.X2)
    ids2 = np.array(dataset.ids2)
    X2[unpaired] = dataset.X2[split.permutation]
    ids2[unpaired] = dataset.ids2[split.permutation]
    return MultimodalDataset(dataset.X1, X2, dataset.labels, dataset.ids1, ids2)


def split_query_retrieval(dataset: MultimodalDataset, n_query: int, seed: int = 0):
    if not 0 < n_query < dataset.n_total:
        raise ConfigurationError(
            f"n_query must lie in (0, {dataset.n_total}), got {n_query}"
        )
    perm = np.random.default_rng(seed).permutation(dataset.n_total)
    return dataset.subset(np.sort(perm[:n_query])), dataset.subset(np.sort(perm[n_query:]))


def save_dataset(dataset: MultimodalDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_total": dataset.n_total,
        "d1": dataset.d1,
        "d2": dataset.d2,
        "label_dim": dataset.label_dim,
        "endianness": "little",
        "dtype": "float32",
    }
    (path / "X1.f32").write_bytes(dataset.X1.astype("<f4").tobytes())
    (path / "X2.f32").write_bytes(dataset.X2.astype("<f4").tobytes())
    lab = path / "labels.u8"
    if dataset.labels is not None:
        lab.write_bytes(dataset.labels.astype(np.uint8).tobytes())
    elif lab.exists():
        lab.unlink()
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _read_payload(file: Path, dtype: str, rows: int, cols: int, field_name: str):
    if not file.exists():
        raise DataFormatError(f"{field_name}: missing file {file.name}")
    raw = file.read_bytes()
    expected = rows * cols * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise DataFormatError(
            f"{field_name}: {file.name} holds {len(raw)} bytes, manifest implies {expected}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(rows, cols)


def load_dataset(path) -> MultimodalDataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise DataFormatError(f"meta.json not found in {path}") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"meta.json: malformed JSON ({exc})") from None
    if not isinstance(meta, dict):
        raise DataFormatError("meta.json: expected an object")
    for key in ("n_total", "d1", "d2", "label_dim"):
        v = meta.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise DataFormatError(f"meta.json: field {key!r} must be a nonnegative integer")
    if meta.get("endianness", "little") != "little":
        raise DataFormatError("meta.json: field 'endianness' must be 'little'")
    if meta.get("dtype", "float32") != "float32":
        raise DataFormatError("meta.json: field 'dtype' must be 'float32'")
    n, d1, d2, L = meta["n_total"], meta["d1"], meta["d2"], meta["label_dim"]
    X1 = _read_payload(path / "X1.f32", "<f4", n, d1, "d1")
    X2 = _read_payload(path / "X2.f32", "<f4", n, d2, "d2")
    for name, X in (("X1", X1), ("X2", X2)):
        if not np.isfinite(X).all():
            raise DataFormatError(f"{name}: payload contains non-finite values")
    labels = None
    if L > 0 and (path / "labels.u8").exists():
        labels = _read_payload(path / "labels.u8", "u1", n, L, "label_dim")
        if labels.max(initial=0) > 1:
            raise DataFormatError("labels: entries must be 0 or 1")
    return MultimodalDataset(X1.astype(np.float64), X2.astype(np.float64), labels)
