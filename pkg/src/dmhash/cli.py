"""``dmh`` command line: generate, train, encode, evaluate, acceptance.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. The default thread count for BLAS-backed numerics comes
from ``DMH_THREADS`` (unset means all cores).
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .cle import CleParams
from .dam import DamParams
from .data import SyntheticConfig, generate_synthetic, load_dataset, make_semi_paired, save_dataset, split_query_retrieval
from .errors import ConfigurationError, DataFormatError, DmhError, ShapeError
from .evaluation import RelevanceOracle, evaluate_direction, read_codes, write_codes, write_report
from .gbe import GbeParams
from .pipeline import VARIANTS, DmhConfig, load_model, save_model, train_dmh, write_log

log = logging.getLogger("dmhash")

THREADS_ENV = "DMH_THREADS"
BITS_CHOICES = (16, 32, 64, 128)


class UsageError(DmhError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- config files -------------------------------------------------------------
# A flat INI file. Sections map onto the dataclasses below; every key must be
# a field of its section's schema.

def _tuple_of_ints(text):
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


_SCHEMA = {
    "data": {f.name: f.type for f in dataclasses.fields(SyntheticConfig)} | {"n_query": "int"},
    "train": {
        "c": "int", "outer_iters": "int", "outer_tol": "float", "variant": "str", "seed": "int",
        "hidden_dims1": "ints", "hidden_dims2": "ints", "feature_layer": "int",
        "normalize_features": "bool", "warm_start_codes": "bool", "pairing_ratio": "float",
    },
    "cle": {f.name: f.type for f in dataclasses.fields(CleParams)},
    "gbe": {f.name: f.type for f in dataclasses.fields(GbeParams)},
    "dam": {f.name: f.type for f in dataclasses.fields(DamParams)},
}


def _convert(kind, raw, where):
    kind = str(kind)
    try:
        if "bool" in kind:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "ints" or "tuple" in kind:
            return _tuple_of_ints(raw)
        if "int" in kind and "float" not in kind:
            if "None" in kind and raw.strip().lower() in ("", "none"):
                return None
            return int(raw)
        if "float" in kind:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigurationError(f"config {where}: cannot parse {raw!r} as {kind}") from None


def read_config(path):
    """Parse a config file into ``{section: {key: value}}``, rejecting unknown names."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise ConfigurationError(f"config file {path}: {exc}") from None
    out = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"config: unknown section [{section}] (known: {sorted(_SCHEMA)})")
        schema = _SCHEMA[section]
        out[section] = {}
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigurationError(f"config: unknown key {key!r} in [{section}]")
            out[section][key] = _convert(schema[key], raw, f"[{section}] {key}")
    return out


def _from_config(args):
    return read_config(args.config) if getattr(args, "config", None) else {}


def _threads(args):
    n = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
    if n in (None, ""):
        return nullcontext()
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise UsageError("thread count must be positive")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# -- commands -----------------------------------------------------------------

def cmd_generate(args):
    cfg = _from_config(args).get("data", {})
    n_query = cfg.pop("n_query", 0)
    for flag, key in (("n_total", "n_total"), ("seed", "seed"), ("noise", "noise_sigma"),
                      ("clusters", "n_clusters"), ("d1", "d1"), ("d2", "d2"), ("d_latent", "d_latent")):
        v = getattr(args, flag)
        if v is not None:
            cfg[key] = v
    if args.n_query is not None:
        n_query = args.n_query
    config = SyntheticConfig(**cfg)
    config.validate()
    ds = generate_synthetic(config)
    out = Path(args.out)
    if n_query:
        if not args.query_out:
            raise UsageError("--n-query needs --query-out for the held-out rows")
        query, rest = split_query_retrieval(ds, n_query, config.seed)
        _save(rest, out)
        _save(query, Path(args.query_out))
        print(f"wrote {rest.n_total} rows to {out} and {query.n_total} query rows to {args.query_out}")
    else:
        _save(ds, out)
        print(f"wrote {ds.n_total} rows to {out}")
    print(f"d1={config.d1} d2={config.d2} clusters={config.n_clusters} seed={config.seed}")
    return 0


def _save(ds, path):
    try:
        save_dataset(ds, path)
    except OSError as exc:
        raise DataFormatError(f"cannot write dataset to {path}: {exc}") from None


def build_train_config(args, d1=None, d2=None):
    """Merge config-file values and flag overrides into ``(DmhConfig, pairing_ratio)``."""
    cfg = _from_config(args)
    train = dict(cfg.get("train", {}))
    pairing = train.pop("pairing_ratio", 1.0)
    cle = dict(cfg.get("cle", {}))
    gbe = dict(cfg.get("gbe", {}))
    dam = dict(cfg.get("dam", {}))
    overrides = (
        (train, "c", args.bits), (train, "variant", args.variant), (train, "seed", args.seed),
        (train, "outer_iters", args.outer_iters), (cle, "lam", args.lam), (cle, "eta", args.eta),
        (cle, "k", args.k), (cle, "d", args.d), (gbe, "gamma", args.gamma),
        (dam, "epochs", args.epochs), (dam, "lr1", args.lr1), (dam, "lr2", args.lr2),
    )
    for target, key, value in overrides:
        if value is not None:
            target[key] = value
    if args.hidden is not None:
        train["hidden_dims1"] = train["hidden_dims2"] = _tuple_of_ints(args.hidden)
    if args.pairing_ratio is not None:
        pairing = args.pairing_ratio
    if train.get("c", 16) not in BITS_CHOICES:
        raise UsageError(f"--bits must be one of {BITS_CHOICES}")
    config = DmhConfig(cle=CleParams(**cle), gbe=GbeParams(**gbe), dam=DamParams(**dam), **train)
    config.validate(d1, d2)
    return config, pairing


def cmd_train(args):
    ds = load_dataset(args.dataset)
    config, pairing = build_train_config(args, ds.d1, ds.d2)
    split = make_semi_paired(ds, pairing, config.seed, k=config.cle.k)
    with _threads(args):
        model = train_dmh(ds.X1, ds.X2, split, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.dmh")
    write_log(model.log, out / "log.jsonl")
    last = model.log[-1]
    print(f"trained {len(model.log)} outer iterations; l1={last['l1']:.6g} l2={last['l2']:.6g} l3={last['l3']:.6g}")
    print(f"wrote {out / 'model.dmh'} and {out / 'log.jsonl'}")
    return 0


_MODALITY = {"1": 1, "2": 2, "image": 1, "text": 2}


def cmd_encode(args):
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    modality = _MODALITY[args.modality]
    X = ds.X1 if modality == 1 else ds.X2
    theta = model.theta1 if modality == 1 else model.theta2
    if X.shape[1] != theta.arch.input_dim:
        raise ShapeError(f"model expects {theta.arch.input_dim} features for modality {modality}, dataset has {X.shape[1]}")
    with _threads(args):
        H = model.encode(X, modality)
    write_codes(H, args.out)
    print(f"wrote {H.shape[0]} codes of {H.shape[1]} bits to {args.out}")
    return 0


def _labels(path):
    ds = load_dataset(path)
    if ds.labels is None:
        raise DataFormatError(f"dataset {path} has no labels")
    return ds.labels


def cmd_evaluate(args):
    qlab, dblab = _labels(args.query_labels), _labels(args.db_labels)
    q = {m: read_codes(p) for m, p in (("I", args.query_image), ("T", args.query_text)) if p}
    db = {m: read_codes(p) for m, p in (("I", args.db_image), ("T", args.db_text)) if p}
    if not q or not db:
        raise UsageError("evaluate needs at least one query code file and one database code file")
    pairs = [(a, b) for a in q for b in db if a != b] or [(a, b) for a in q for b in db]
    cs = {H.shape[1] for H in list(q.values()) + list(db.values())}
    if len(cs) != 1:
        raise ShapeError(f"code files disagree on bit length: {sorted(cs)}")
    for name, codes, lab in [("query", H, qlab) for H in q.values()] + [("database", H, dblab) for H in db.values()]:
        if codes.shape[0] != lab.shape[0]:
            raise ShapeError(f"{name} codes have {codes.shape[0]} rows but labels have {lab.shape[0]}")
    oracle = RelevanceOracle(qlab, dblab)
    reports = [evaluate_direction(q[a], db[b], oracle, f"{a}->{b}", map_at=tuple(args.map_at))
               for a, b in pairs]
    write_report(reports, args.out)
    for r in reports:
        print(f"{r.direction}: MAP {r.map_full:.4f}")
    return 0


def cmd_acceptance(args):
    from . import acceptance

    seeds = args.seed
    if args.fast:
        seeds = seeds[:1]
    numbers = sorted(set(args.only)) if args.only else None
    with _threads(args):
        results = acceptance.run_all(seeds, numbers)
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed" + (f"; failed: {failed}" if failed else ""))
    return 0 if not failed else 3


# -- parser -------------------------------------------------------------------

def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("--threads", type=int, default=None,
                        help=f"BLAS thread limit (default: ${THREADS_ENV} or all cores)")
    p = _Parser(prog="dmh", description="Semi-paired cross-modal hashing toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic two-modality dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--config", help="INI config file ([data] section)")
    g.add_argument("--seed", type=int, help="generator seed (default 0)")
    g.add_argument("--n-total", type=int, help="number of objects (default 1200)")
    g.add_argument("--noise", type=float, help="observation noise sigma (default 0.5)")
    g.add_argument("--clusters", type=int, help="number of clusters (default 4)")
    g.add_argument("--d1", type=int, help="modality-1 dimension (default 64)")
    g.add_argument("--d2", type=int, help="modality-2 dimension (default 64)")
    g.add_argument("--d-latent", type=int, help="latent dimension (default 8)")
    g.add_argument("--n-query", type=int, help="hold out this many rows as queries (default none)")
    g.add_argument("--query-out", help="directory for held-out query rows")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train hash functions on a dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    t.add_argument("dataset", help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for model.dmh and log.jsonl")
    t.add_argument("--config", help="INI config file ([train], [cle], [gbe], [dam] sections)")
    t.add_argument("--bits", type=int, choices=BITS_CHOICES, help="code length (default 16)")
    t.add_argument("--pairing-ratio", type=float, help="fraction of objects kept paired (default 1.0)")
    t.add_argument("--variant", choices=VARIANTS, help="full or an ablation (default full)")
    t.add_argument("--seed", type=int, help="seed for every stage (default 0)")
    t.add_argument("--lambda", dest="lam", type=float, help="local consistency weight (default 0.1)")
    t.add_argument("--eta", type=float, help="embedding ridge weight (default 0.01)")
    t.add_argument("--gamma", type=float, help="quantization weight (default 0.01)")
    t.add_argument("--k", type=int, help="neighbours per object (default 3)")
    t.add_argument("--d", type=int, help="embedding dimension (default 512)")
    t.add_argument("--hidden", help="encoder hidden sizes, e.g. 1024,512 (default 1024,512)")
    t.add_argument("--epochs", type=int, help="encoder epoch budget per outer iteration (default 50)")
    t.add_argument("--lr1", type=float, help="modality-1 encoder learning rate (default 10^-4.5)")
    t.add_argument("--lr2", type=float, help="modality-2 encoder learning rate (default 10^-3.5)")
    t.add_argument("--outer-iters", type=int, help="outer iterations (default 5)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", parents=[common], help="hash one modality of a dataset")
    e.add_argument("model", help="model.dmh file")
    e.add_argument("dataset", help="dataset directory")
    e.add_argument("--modality", required=True, choices=sorted(_MODALITY), help="which modality to encode")
    e.add_argument("--out", required=True, help="output code file")
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("evaluate", parents=[common], help="score code files by Hamming ranking and hash lookup")
    v.add_argument("--query-image", help="query codes from modality 1")
    v.add_argument("--query-text", help="query codes from modality 2")
    v.add_argument("--db-image", help="database codes from modality 1")
    v.add_argument("--db-text", help="database codes from modality 2")
    v.add_argument("--query-labels", required=True, help="dataset directory holding the query labels")
    v.add_argument("--db-labels", required=True, help="dataset directory holding the database labels")
    v.add_argument("--map-at", type=_csv_ints, default=[50], help="extra MAP cutoffs (default 50)")
    v.add_argument("--out", required=True, help="report JSON path; CSV curves are written beside it")
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("acceptance", parents=[common], help="run the numbered acceptance checks")
    a.add_argument("--seed", type=int, action="append", required=True,
                   help="seed to include (repeat for several, e.g. --seed 0 --seed 1)")
    a.add_argument("--fast", action="store_true", help="use only the first seed")
    a.add_argument("--only", type=_csv_ints, help="comma separated criterion numbers")
    a.set_defaults(func=cmd_acceptance)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
        return args.func(args)
    except DmhError as exc:
        print(f"dmh: error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    except OSError as exc:
        print(f"dmh: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
