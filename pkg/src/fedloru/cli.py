"""Command-line entry point: ``fedloru {train,spectral,hessian,report}``.

Configs are JSON objects. Exit codes: 0 success, 1 configuration or input
error, 2 runtime failure.
"""

import argparse
import dataclasses
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .data import generate_synthetic, read_csv
from .errors import ConfigError, DataError, NumericError, RankError, ShapeError
from .experiment import TrainConfig, build_experiment, read_metrics, run_rounds, write_metrics
from .federation import ratio_metric
from .model import format_checkpoint
from .seeding import derive_seed
from .spectral import (
    Semicircle,
    ScaleFunction,
    SpikedModel,
    build_true_hessian,
    extreme_stable_rank,
    fit_logistic,
    empirical_stable_rank,
    limiting_stable_rank_difference,
    predicted_eigenvalue,
    sample_wigner,
    weyl_sandwich_check,
)
from .linalg import symmetric_eigvals

log = logging.getLogger("fedloru")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Config:
    """Mixin: strict dict loading and JSON round-tripping."""

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class SpectralConfig(_Config):
    thetas: list = field(default_factory=lambda: [3.0, -2.0])
    sigma: float = 1.0
    dimension: int = 1000
    sizes: list = field(default_factory=lambda: [100, 1000])
    seeds: int = 10
    gamma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if len(self.sizes) != 2 or not self.sizes[0] < self.sizes[1]:
            raise ConfigError("sizes must be [M, N] with M < N")
        if self.seeds < 1 or self.dimension < 2 or self.sigma <= 0:
            raise ConfigError("seeds, dimension and sigma must be positive")
        try:
            SpikedModel(tuple(float(t) for t in self.thetas), self.dimension)
        except ValueError as exc:
            raise ConfigError(f"invalid spikes: {exc}") from None


@dataclass
class HessianConfig(_Config):
    data_path: str | None = None
    n_samples: int = 2000
    n_features: int = 20
    n_classes: int = 5
    cluster_spread: float = 0.5
    sizes: list = field(default_factory=lambda: [50, 500])
    seeds: int = 20
    fit_epochs: int = 50
    fit_lr: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.sizes or self.seeds < 1:
            raise ConfigError("sizes must be non-empty and seeds positive")


def _load(path, cls):
    if path is None:
        return cls()
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cls.from_dict(d)


def _with_seed(cfg, seed):
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)


@contextmanager
def _mapper(threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            yield pool.map
    else:
        yield map


def _write_records(path, records):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


# -- train ------------------------------------------------------------------------

def cmd_train(args):
    cfg = _with_seed(_load(args.config, TrainConfig), args.seed)
    out = args.out or "metrics.jsonl"
    exp = build_experiment(cfg)

    def check(rec):
        if not math.isfinite(rec.train_loss):
            raise NumericError(f"round {rec.round}: non-finite training loss")

    with _mapper(args.threads) as map_fn:
        try:
            run_rounds(exp, map_fn=map_fn, callback=check)
        except (NumericError, FloatingPointError) as exc:
            write_metrics(out, cfg, exp.history)
            msg = str(exc) if str(exc).startswith("round") else f"round {exp.server.round + 1}: {exc}"
            raise NumericError(msg) from None
    write_metrics(out, cfg, exp.history)
    if args.checkpoint:
        with open(args.checkpoint, "w") as f:
            f.write(format_checkpoint(exp.server.model))
    uplink = sum(r.uplink_params for r in exp.history)
    if exp.history:
        print(f"final test accuracy {exp.history[-1].test_acc:.4f}; total uplink params {uplink}")
    else:
        print("no rounds run; total uplink params 0")
    return EXIT_OK


# -- spectral ---------------------------------------------------------------------

SPECTRAL_STATISTICS = (
    ("predicted_top", "M"), ("empirical_top", "M"),
    ("predicted_top", "N"), ("empirical_top", "N"),
    ("weyl_pass_rate", "M"), ("weyl_pass_rate", "N"),
    ("limiting_srank_difference", None), ("empirical_srank_difference", None),
)


def spectral_records(cfg, map_fn=map):
    """One record per (seed, statistic); ``len == seeds * len(SPECTRAL_STATISTICS)``."""
    model = SpikedModel(tuple(float(t) for t in cfg.thetas), cfg.dimension)
    measure = Semicircle(cfg.sigma)
    scale = ScaleFunction(cfg.gamma)
    m, n = cfg.sizes
    s_of = {"M": scale(m), "N": scale(n)}
    size_of = {"M": m, "N": n}
    predicted = {k: predicted_eigenvalue(model.thetas[0], size_of[k], measure, scale) for k in "MN"}
    limiting = limiting_stable_rank_difference(model, m, n, measure, scale)
    h_true = build_true_hessian(model)

    def one(i):
        sd = derive_seed(cfg.seed, "spectral", i)
        vals = {}
        srank = {}
        for k in "MN":
            eps = s_of[k] * sample_wigner(cfg.dimension, cfg.sigma, derive_seed(sd, k))
            ev = symmetric_eigvals(h_true + eps)
            vals[("empirical_top", k)] = float(ev[0])
            vals[("predicted_top", k)] = predicted[k]
            vals[("weyl_pass_rate", k)] = weyl_sandwich_check(h_true, eps, model.p, model.q).pass_rate
            srank[k] = extreme_stable_rank(model, ev)
        vals[("limiting_srank_difference", None)] = limiting
        vals[("empirical_srank_difference", None)] = srank["M"] - srank["N"]
        rows = []
        for stat, k in SPECTRAL_STATISTICS:
            rows.append({"experiment": "spiked", "R": cfg.dimension,
                         "N": size_of[k] if k else [m, n], "seed": i,
                         "statistic": stat, "value": vals[(stat, k)]})
        return rows

    return [r for rows in map_fn(one, range(cfg.seeds)) for r in rows]


def cmd_spectral(args):
    cfg = _with_seed(_load(args.config, SpectralConfig), args.seed)
    with _mapper(args.threads) as map_fn:
        records = spectral_records(cfg, map_fn)
    _write_records(args.out, records)
    return EXIT_OK


# -- hessian ----------------------------------------------------------------------

def hessian_records(cfg):
    if cfg.data_path:
        ds = read_csv(cfg.data_path)
    else:
        ds = generate_synthetic(cfg.n_samples, cfg.n_features, cfg.n_classes, cfg.cluster_spread,
                                derive_seed(cfg.seed, "data"))
    for s in cfg.sizes:
        if s > len(ds) or s < 1:
            raise ConfigError(f"size {s} outside 1..{len(ds)}")
    model = fit_logistic(ds, epochs=cfg.fit_epochs, lr=cfg.fit_lr, seed=cfg.seed)
    seeds = [derive_seed(cfg.seed, "hessian", i) for i in range(cfg.seeds)]
    rows = empirical_stable_rank(ds, model, cfg.sizes, seeds)
    out = []
    for size, mean, sd in rows:
        out.append({"experiment": "hessian", "R": model.layers[0].base.size + model.layers[0].bias.size,
                    "N": size, "seed": cfg.seed, "statistic": "srank_mean", "value": mean})
        out.append({"experiment": "hessian", "R": model.layers[0].base.size + model.layers[0].bias.size,
                    "N": size, "seed": cfg.seed, "statistic": "srank_stdev", "value": sd})
    means = [m for _, m, _ in rows]
    out.append({"experiment": "hessian", "R": out[0]["R"], "N": list(cfg.sizes), "seed": cfg.seed,
                "statistic": "decreasing_in_size", "value": bool(all(a > b for a, b in zip(means, means[1:])))})
    return out


def cmd_hessian(args):
    cfg = _with_seed(_load(args.config, HessianConfig), args.seed)
    _write_records(args.out, hessian_records(cfg))
    return EXIT_OK


# -- report -----------------------------------------------------------------------

_PAIR_EXCLUDE = {"algorithm", "lr", "lr_min", "rank", "tau", "reinit", "alpha", "init_scale", "label"}


def _pair_key(cfg):
    if cfg.label:
        return ("label", cfg.label)
    d = cfg.to_dict()
    return tuple(sorted((k, json.dumps(v)) for k, v in d.items() if k not in _PAIR_EXCLUDE))


def _read_metrics_checked(path):
    try:
        cfg, records = read_metrics(path)
    except (OSError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}:1: bad header ({exc})") from None
    for i, r in enumerate(records, start=2):
        for key in ("round", "test_acc", "uplink_params", "downlink_params"):
            if key not in r:
                raise ConfigError(f"{path}:{i}: missing field {key!r}")
    return cfg, records


def report_rows(paths):
    rows = []
    for path in paths:
        cfg, records = _read_metrics_checked(path)
        last = records[-1] if records else {}
        rows.append({
            "file": path,
            "algorithm": cfg.algorithm,
            "clients": cfg.clients,
            "rounds": len(records),
            "test_acc": last.get("test_acc"),
            "personalized_acc": last.get("personalized_acc"),
            "uplink_params": sum(r["uplink_params"] for r in records),
            "downlink_params": sum(r["downlink_params"] for r in records),
            "ratio": None,
            "_key": _pair_key(cfg),
        })
    by_key = {}
    for r in rows:
        by_key.setdefault(r["_key"], {}).setdefault(r["algorithm"], r)
    for group in by_key.values():
        avg, loru = group.get("fedavg"), group.get("fedloru")
        if avg and loru and avg["test_acc"] is not None and loru["test_acc"]:
            if avg["test_acc"] != 0:
                loru["ratio"] = ratio_metric(avg["test_acc"], loru["test_acc"])
    for r in rows:
        del r["_key"]
    return rows


def format_report(rows):
    def f(v, spec):
        return "" if v is None else format(v, spec)

    header = ["file", "algorithm", "K", "rounds", "test_acc", "pers_acc", "uplink", "downlink", "ratio"]
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join([
            r["file"], r["algorithm"], str(r["clients"]), str(r["rounds"]), f(r["test_acc"], ".4f"),
            f(r["personalized_acc"], ".4f"), str(r["uplink_params"]), str(r["downlink_params"]),
            f(r["ratio"], ".4f"),
        ]))
    return "\n".join(lines) + "\n"


def cmd_report(args):
    if not args.files:
        raise ConfigError("report needs at least one metrics file")
    text = format_report(report_rows(args.files))
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="fedloru", description="Low-rank federated learning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--threads", type=int, default=1, help="worker threads")

    sp = sub.add_parser("train", help="run a federated training simulation")
    common(sp)
    sp.add_argument("--checkpoint", help="also write the final server model here")
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("spectral", help="spiked-model eigenvalue and stable-rank checks")
    common(sp)
    sp.set_defaults(func=cmd_spectral)
    sp = sub.add_parser("hessian", help="exact-Hessian stable rank versus sample size")
    common(sp)
    sp.set_defaults(func=cmd_hessian)
    sp = sub.add_parser("report", help="summarise metrics files")
    common(sp, config=False)
    sp.add_argument("files", nargs="*")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, RankError, ShapeError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
