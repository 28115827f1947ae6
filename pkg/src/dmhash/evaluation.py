"""Hamming-space retrieval metrics.

Conventions:

* ranking ties are broken by ascending database index;
* a query with no relevant item inside the evaluated prefix has AP = 0 and
  still counts towards MAP;
* in hash lookup, a query returning nothing at some radius is left out of the
  precision average for that radius (recall still counts it). If no query
  returns anything, precision is reported as 0.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataFormatError, ShapeError


def _as_codes(H):
    H = np.asarray(H)
    if H.ndim == 1:
        H = H[None, :]
    return H


def pack_codes(H):
    """Pack +-1 codes into uint64 words (bit 1 <-> +1), zero padded."""
    H = _as_codes(H)
    bits = np.packbits(H > 0, axis=1)
    words = -(-bits.shape[1] // 8)
    padded = np.zeros((H.shape[0], words * 8), dtype=np.uint8)
    padded[:, : bits.shape[1]] = bits
    return np.ascontiguousarray(padded).view("<u8").astype(np.uint64, copy=False)


def hamming_matrix(query_codes, db_codes):
    Q, B = _as_codes(query_codes), _as_codes(db_codes)
    if Q.shape[1] != B.shape[1]:
        raise ShapeError(f"code length mismatch: {Q.shape[1]} vs {B.shape[1]}")
    return kernels.hamming_packed(pack_codes(Q), pack_codes(B))


def hamming_distance(h1, h2) -> int:
    h1, h2 = np.asarray(h1), np.asarray(h2)
    if h1.shape != h2.shape:
        raise ShapeError(f"code length mismatch: {h1.shape} vs {h2.shape}")
    return int(hamming_matrix(h1, h2)[0, 0])


def rank_by_hamming(query_code, db_codes):
    d = hamming_matrix(query_code, db_codes)[0]
    return np.argsort(d, kind="stable")


@dataclass(frozen=True, eq=False)
class RelevanceOracle:
    """Items are relevant to each other iff their label vectors share an active bit."""

    query_labels: np.ndarray
    db_labels: np.ndarray

    def matrix(self):
        q = np.asarray(self.query_labels, dtype=np.int64)
        b = np.asarray(self.db_labels, dtype=np.int64)
        if q.shape[1] != b.shape[1]:
            raise ShapeError("query and database label widths differ")
        return (q @ b.T) > 0


def average_precision(ranking, relevant, radius=None) -> float:
    rel = np.asarray(relevant, dtype=bool)[np.asarray(ranking)]
    if radius is not None:
        rel = rel[:radius]
    hits = rel.sum()
    if hits == 0:
        return 0.0
    cum = np.cumsum(rel)
    pos = np.arange(1, rel.size + 1)
    return float(np.sum((cum / pos)[rel]) / hits)


def _ranked_relevance(query_codes, db_codes, oracle):
    D = hamming_matrix(query_codes, db_codes)
    order = np.argsort(D, axis=1, kind="stable")
    R = oracle.matrix() if isinstance(oracle, RelevanceOracle) else np.asarray(oracle, dtype=bool)
    if R.shape != D.shape:
        raise ShapeError(f"relevance matrix {R.shape} does not match {D.shape}")
    return np.take_along_axis(R, order, axis=1), D, R


def _ap_rows(rel):
    hits = rel.sum(axis=1)
    cum = np.cumsum(rel, axis=1)
    pos = np.arange(1, rel.shape[1] + 1)
    num = np.sum(np.where(rel, cum / pos, 0.0), axis=1)
    return np.where(hits > 0, num / np.maximum(hits, 1), 0.0)


def mean_average_precision(query_codes, db_codes, oracle, radius=None) -> float:
    """MAP over all queries; ``radius=N`` restricts each ranking to its top N."""
    rel, _, _ = _ranked_relevance(query_codes, db_codes, oracle)
    if radius is not None:
        rel = rel[:, :radius]
    return float(_ap_rows(rel).mean())


def topn_points(db_size, n_points):
    n_points = min(int(n_points), db_size)
    return sorted({max(1, round(i * db_size / n_points)) for i in range(1, n_points + 1)})


def topn_precision_curve(query_codes, db_codes, oracle, n_points=10):
    rel, _, _ = _ranked_relevance(query_codes, db_codes, oracle)
    cum = np.cumsum(rel, axis=1)
    return [(N, float(np.mean(cum[:, N - 1] / N))) for N in topn_points(rel.shape[1], n_points)]


def pr_curve_hash_lookup(query_codes, db_codes, oracle):
    """(radius, precision, recall) for every radius 0..c."""
    Qc = _as_codes(query_codes)
    _, D, R = _ranked_relevance(Qc, db_codes, oracle)
    c = Qc.shape[1]
    total_rel = R.sum(axis=1)
    curve = []
    for r in range(c + 1):
        ret = D <= r
        n_ret = ret.sum(axis=1)
        n_hit = (ret & R).sum(axis=1)
        pm = n_ret > 0
        prec = float(np.mean(n_hit[pm] / n_ret[pm])) if pm.any() else 0.0
        rm = total_rel > 0
        rec = float(np.mean(n_hit[rm] / total_rel[rm])) if rm.any() else 0.0
        curve.append((r, prec, rec))
    return curve


@dataclass
class RetrievalReport:
    direction: str
    c: int
    map_full: float
    map_at: list = field(default_factory=list)
    topn_curve: list = field(default_factory=list)
    pr_curve: list = field(default_factory=list)

    def to_json(self):
        return {
            "direction": self.direction,
            "c": self.c,
            "map_full": self.map_full,
            "map_at": [{"N": n, "map": v} for n, v in self.map_at],
            "topn_curve": [{"N": n, "precision": p} for n, p in self.topn_curve],
            "pr_curve": [{"radius": r, "precision": p, "recall": q} for r, p, q in self.pr_curve],
        }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["c", "reports"],
    "properties": {
        "c": {"type": "integer", "minimum": 1},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["direction", "c", "map_full", "map_at", "topn_curve", "pr_curve"],
                "properties": {
                    "direction": {"enum": ["I->T", "T->I", "I->I", "T->T"]},
                    "c": {"type": "integer"},
                    "map_full": {"type": "number", "minimum": 0, "maximum": 1},
                    "map_at": {"type": "array", "items": {
                        "type": "object", "required": ["N", "map"],
                        "properties": {"N": {"type": "integer"}, "map": {"type": "number", "minimum": 0, "maximum": 1}}}},
                    "topn_curve": {"type": "array", "items": {
                        "type": "object", "required": ["N", "precision"],
                        "properties": {"N": {"type": "integer"}, "precision": {"type": "number", "minimum": 0, "maximum": 1}}}},
                    "pr_curve": {"type": "array", "items": {
                        "type": "object", "required": ["radius", "precision", "recall"],
                        "properties": {
                            "radius": {"type": "integer"},
                            "precision": {"type": "number", "minimum": 0, "maximum": 1},
                            "recall": {"type": "number", "minimum": 0, "maximum": 1}}}},
                },
            },
        },
    },
}


def evaluate_direction(query_codes, db_codes, oracle, direction, map_at=(50,), n_points=10):
    Qc, Bc = _as_codes(query_codes), _as_codes(db_codes)
    rel, _, _ = _ranked_relevance(Qc, Bc, oracle)
    ap = _ap_rows(rel)
    return RetrievalReport(
        direction=direction,
        c=Qc.shape[1],
        map_full=float(ap.mean()),
        map_at=[(int(N), float(_ap_rows(rel[:, :N]).mean())) for N in map_at if N <= Bc.shape[0]],
        topn_curve=topn_precision_curve(Qc, Bc, oracle, n_points),
        pr_curve=pr_curve_hash_lookup(Qc, Bc, oracle),
    )


def write_report(reports, path):
    """Write the JSON report plus ``<stem>_<dir>_topn.csv`` and ``<stem>_<dir>_pr.csv``."""
    path = Path(path)
    c = reports[0].c
    doc = {"c": c, "reports": [r.to_json() for r in reports]}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    written = [path]
    for r in reports:
        tag = r.direction.replace("->", "2")
        topn = path.with_name(f"{path.stem}_{tag}_topn.csv")
        with topn.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "precision", "recall"])
            for n, p in r.topn_curve:
                w.writerow([n, repr(p), ""])
        pr = path.with_name(f"{path.stem}_{tag}_pr.csv")
        with pr.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["radius", "precision", "recall"])
            for rad, p, q in r.pr_curve:
                w.writerow([rad, repr(p), repr(q)])
        written += [topn, pr]
    return written


CODES_MAGIC = b"HC"
_CODES_HEADER = struct.Struct("<2sHI")


def codes_to_bytes(H) -> bytes:
    """8-byte header (magic, c as uint16, n as uint32) then rows packed MSB-first, bit 1 = +1."""
    H = _as_codes(H)
    n, c = H.shape
    if not 0 < c < 1 << 16:
        raise ShapeError(f"bit length {c} does not fit the code file header")
    return _CODES_HEADER.pack(CODES_MAGIC, c, n) + np.packbits(H > 0, axis=1).tobytes()


def codes_from_bytes(raw: bytes):
    if len(raw) < _CODES_HEADER.size:
        raise DataFormatError("code file shorter than its header")
    magic, c, n = _CODES_HEADER.unpack_from(raw)
    if magic != CODES_MAGIC:
        raise DataFormatError("not a code file (bad magic)")
    if c == 0:
        raise DataFormatError("code file header has c = 0")
    row_bytes = -(-c // 8)
    body = raw[_CODES_HEADER.size :]
    if len(body) != n * row_bytes:
        raise DataFormatError(f"code file holds {len(body)} payload bytes, header implies {n * row_bytes}")
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8).reshape(n, row_bytes), axis=1)[:, :c]
    return np.where(bits == 1, 1.0, -1.0)


def write_codes(H, path) -> Path:
    path = Path(path)
    path.write_bytes(codes_to_bytes(H))
    return path


def read_codes(path):
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"code file not found: {path}") from None
    return codes_from_bytes(raw)
