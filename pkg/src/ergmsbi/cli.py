"""Command-line workflows: simulate, train, sample, exchange, evaluate, compare, selftest, figures.

Configuration precedence, lowest first: built-in defaults, the YAML config
file, ``--set section.key=value`` overrides, then dedicated flags such as
``--seed`` or ``--output-dir``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .exchange import ExchangePosterior, PriorSpec, ProposalSpec, run_exchange
from .flow import MafModel
from .graph import StatsConfig
from .harness import EvalCase, compare_methods, run_bias_eval, stratified_truths
from .npe import (
    LeakageError,
    NpeConfig,
    SnpeConfig,
    TrainingError,
    posterior_sample,
    simulate_prior_round,
    train_npe,
    train_snpe,
)
from .simulate import SimConfig, TrainingSet, simulate_stats_batch

log = logging.getLogger("ergmsbi")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_SELFTEST = 0, 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "dataset": None,
    "checkpoint": None,
    "figures": False,
    "stats": {"decay": 0.75, "stat_set": ["edges", "gwesp", "gwnsp"]},
    "sim": {"n": 16, "iterations": 5000, "init": "empty", "thin": 1},
    "prior": {"mean": None, "variance": 10.0, "cov": None},
    "proposal": {"sd": 0.1, "adapt": False},
    "exchange": {"T": 7000, "burn_in": 1000, "reuse_aux": False, "x_obs": None},
    "npe": {"B": 50_000, "epochs": 200, "batch_size": 256, "learning_rate": 5e-4,
            "validation_fraction": 0.1, "early_stop_patience": 20, "num_transforms": 5,
            "hidden_units": 50, "hidden_layers": 2},
    "snpe": {"rounds": 5, "per_round_B": 1000, "atoms_per_batch": 10, "x_obs": None,
             "diagnostic_draws": 10_000, "round_draws": 2000},
    "simulate": {"thetas": None, "B": None},
    "sample": {"x_obs": None, "count": 1000, "truncate": False},
    "harness": {"cases": None, "strata": [2, 2, 2, 2], "box_lo": None, "box_hi": None, "pilot": 10,
                "max_attempts": 2000, "M": 50, "posterior_draws": 1000, "predictive_draws": 100,
                "true_draws": None},
    "compare": {"case": 0, "M": 10, "exchange_draws": None},
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# -- configuration -----------------------------------------------------------------


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _override(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    update = yaml.safe_load(raw)
    for k in reversed(path.split(".")):
        update = {k: update}
    return _merge(cfg, update)


def load_config(path=None, overrides=(), **flags) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, doc)
    for item in overrides:
        cfg = _override(cfg, item)
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _vector(value, dim, name):
    if value is None:
        return None
    if isinstance(value, str):
        value = [float(v) for v in value.split(",")]
    arr = np.asarray(value, dtype=float).reshape(-1)
    if len(arr) != dim:
        raise ConfigError(f"{name} has {len(arr)} entries, expected {dim}")
    return arr


class Run:
    """Typed objects built from a resolved config dictionary."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        try:
            self.seed = int(cfg["seed"])
            self.stats = StatsConfig(float(cfg["stats"]["decay"]), tuple(cfg["stats"]["stat_set"]))
            p = self.stats.dim
            s = cfg["sim"]
            self.sim = SimConfig(n=int(s["n"]), iterations=int(s["iterations"]), init=s["init"],
                                 seed=self.seed, thin=int(s["thin"]), stats=self.stats)
            pr = cfg["prior"]
            mean = _vector(pr["mean"], p, "prior.mean")
            mean = np.zeros(p) if mean is None else mean
            cov = np.eye(p) * float(pr["variance"]) if pr["cov"] is None else np.asarray(pr["cov"], dtype=float)
            if cov.shape != (p, p):
                raise ConfigError(f"prior.cov must be {p}x{p}")
            self.prior = PriorSpec(mean, cov)
            self.proposal = ProposalSpec.isotropic(p, float(cfg["proposal"]["sd"]), bool(cfg["proposal"]["adapt"]))
            self.npe = NpeConfig(seed=self.seed, **cfg["npe"])
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        self.out = Path(cfg["output_dir"])

    @property
    def dim(self) -> int:
        return self.stats.dim

    def snpe(self, x_obs=None) -> SnpeConfig:
        s = {k: v for k, v in self.cfg["snpe"].items() if k not in ("x_obs", "round_draws")}
        x = _vector(x_obs if x_obs is not None else self.cfg["snpe"]["x_obs"], self.dim, "snpe.x_obs")
        if x is None:
            raise ConfigError("snpe mode needs snpe.x_obs")
        base = {k: v for k, v in self.cfg["npe"].items() if k != "B"}
        try:
            return SnpeConfig(B=int(s["per_round_B"]), seed=self.seed, x_obs=tuple(x), **base, **s)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def checkpoint(self, path=None) -> MafModel:
        path = path or self.cfg["checkpoint"]
        if path is None:
            raise ConfigError("no checkpoint given")
        try:
            model = MafModel.load(path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
        if model.p != self.dim:
            raise ConfigError(f"checkpoint has {model.p} parameters, config has {self.dim} statistics")
        return model

    def cases(self) -> list[EvalCase]:
        h = self.cfg["harness"]
        if h["cases"] is not None:
            return [EvalCase(_vector(t, self.dim, "harness.cases"), (float("nan"), float("nan")), k)
                    for k, t in enumerate(h["cases"])]
        lo = _vector(h["box_lo"], self.dim, "harness.box_lo")
        hi = _vector(h["box_hi"], self.dim, "harness.box_hi")
        if lo is None or hi is None:
            raise ConfigError("stratified cases need harness.box_lo and harness.box_hi")
        return stratified_truths(h["strata"], (lo, hi), self.sim, seed=self.seed, pilot=int(h["pilot"]),
                                 max_attempts=int(h["max_attempts"]))

    def manifest(self, command: str, outputs: dict, **extra) -> Path:
        echo = {k: v for k, v in self.cfg.items()}
        doc = {"command": command, "tool_version": __version__, "config_hash": config_hash(echo),
               "config": echo, "outputs": {k: str(v) for k, v in outputs.items()}, **extra}
        path = self.out / f"manifest_{command}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in row])


def _theta_header(p):
    return [f"theta_{k}" for k in range(1, p + 1)]


def _render(run: Run):
    if run.cfg["figures"]:
        from .plotting import render_directory

        for path in render_directory(run.out, list(run.stats.stat_set)):
            print(f"figure {path}")


# -- commands -----------------------------------------------------------------------


def cmd_simulate(run: Run, args) -> int:
    section = run.cfg["simulate"]
    if section["thetas"] is not None:
        thetas = np.asarray(section["thetas"], dtype=float).reshape(-1, run.dim)
        data = simulate_stats_batch(thetas, run.sim, workers=args.workers) if len(thetas) else TrainingSet.empty(run.dim)
    else:
        B = int(section["B"] or run.npe.B)
        data = simulate_prior_round(run.prior, B, run.sim, workers=args.workers)
    path = run.out / "train.csv"
    data.to_csv(path)
    run.manifest("simulate", {"dataset": path}, seed=run.seed, pairs=len(data))
    print(f"wrote {len(data)} pairs to {path}")
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    ckpt = run.out / "model.json"
    if args.mode == "npe":
        if run.cfg["dataset"]:
            data = TrainingSet.from_csv(run.cfg["dataset"])
            if data.dim != run.dim:
                raise ConfigError("dataset dimension does not match the statistic set")
        else:
            data = simulate_prior_round(run.prior, run.npe.B, run.sim, workers=args.workers)
        try:
            model, hist = train_npe(data, run.npe)
        except TrainingError as exc:
            _dump_failure(run, exc)
            raise
        model.save(ckpt, run.stats)
        run.manifest("train", {"checkpoint": ckpt}, mode="npe", pairs=len(data),
                     train_loss=hist.train_loss, val_loss=hist.val_loss, best_epoch=hist.best_epoch)
        print(f"best validation loss {hist.best_val_loss:.4f} at epoch {hist.best_epoch}; wrote {ckpt}")
    else:
        cfg = run.snpe(args.x_obs)
        try:
            model, diags = train_snpe(cfg, run.prior, run.sim, workers=args.workers,
                                      on_round=lambda d: print(f"round {d.round}: mean {np.round(d.posterior_mean, 3)} "
                                                               f"sd {np.round(d.posterior_sd, 3)} leakage {d.leakage:.3f}"))
        except TrainingError as exc:
            _dump_failure(run, exc)
            raise
        model.save(ckpt, run.stats)
        draws = int(run.cfg["snpe"]["round_draws"])
        rows = []
        for d in diags:
            sample, _ = posterior_sample(d.model, np.array(cfg.x_obs), draws, run.prior,
                                         rng=np.random.default_rng([run.seed, d.round]))
            rows += [[d.round, *row] for row in sample]
        rounds_csv = run.out / "snpe_rounds.csv"
        _write_rows(rounds_csv, ["round"] + _theta_header(run.dim), rows)
        run.manifest("train", {"checkpoint": ckpt, "rounds": rounds_csv}, mode="snpe",
                     rounds=[d.to_dict() for d in diags])
        print(f"wrote {ckpt}")
        _render(run)
    return EXIT_OK


def _dump_failure(run: Run, exc):
    path = run.out / "failure.json"
    path.write_text(json.dumps({"error": str(exc), "config": run.cfg}, indent=2, sort_keys=True))
    print(f"diagnostics written to {path}", file=sys.stderr)


def cmd_sample(run: Run, args) -> int:
    model = run.checkpoint(args.checkpoint)
    section = run.cfg["sample"]
    x = _vector(args.x_obs if args.x_obs is not None else section["x_obs"], model.context_dim, "x_obs")
    if x is None:
        raise ConfigError("sample needs x_obs")
    count = int(args.count if args.count is not None else section["count"])
    truncate = bool(args.truncate or section["truncate"])
    draws, leak = posterior_sample(model, x, count, run.prior, truncate=truncate,
                                   rng=np.random.default_rng(run.seed))
    path = run.out / "samples.csv"
    _write_rows(path, _theta_header(model.p), draws)
    run.manifest("sample", {"samples": path}, leakage=leak, count=count, x_obs=x.tolist())
    print(f"wrote {count} draws to {path}; leakage fraction {leak:.4f}")
    return EXIT_OK


def cmd_exchange(run: Run, args) -> int:
    x = _vector(args.x_obs if args.x_obs is not None else run.cfg["exchange"]["x_obs"], run.dim, "x_obs")
    if x is None:
        raise ConfigError("exchange needs x_obs")
    e = run.cfg["exchange"]
    chain = run_exchange(x, int(e["T"]), int(e["burn_in"]), run.prior, run.proposal, run.sim, seed=run.seed,
                         reuse_aux=bool(e["reuse_aux"]))
    path = run.out / "chain.csv"
    chain.to_csv(path)
    summary = chain.summary()
    run.manifest("exchange", {"chain": path}, summary=summary)
    print(f"acceptance rate {summary['acceptance_rate']:.3f}")
    print(f"posterior mean {np.round(summary['mean'], 4).tolist()}")
    print(f"posterior sd {np.round(summary['sd'], 4).tolist()}")
    return EXIT_OK


def cmd_evaluate(run: Run, args) -> int:
    model = run.checkpoint(args.checkpoint)
    cases = run.cases()
    if not cases:
        raise ConfigError("no evaluation cases")
    h = run.cfg["harness"]
    ev = run_bias_eval(cases, int(h["M"]), model, run.sim, posterior_draws=int(h["posterior_draws"]),
                       predictive_draws=int(h["predictive_draws"]), true_draws=h["true_draws"], seed=run.seed,
                       workers=args.workers)
    ev.write(run.out, run.stats.stat_set)
    run.manifest("evaluate", {"cases": run.out / "bias_cases.csv", "magnitude": run.out / "magnitude.csv",
                              "summary": run.out / "bias_summary.json"})
    print("ME", np.round(ev.bias.me, 4).tolist())
    print("MAE", np.round(ev.bias.mae, 4).tolist())
    print("RMSE", np.round(ev.bias.rmse, 4).tolist())
    _render(run)
    return EXIT_OK


def cmd_compare(run: Run, args) -> int:
    model = run.checkpoint(args.checkpoint)
    cases = run.cases()
    c = run.cfg["compare"]
    if not 0 <= int(c["case"]) < len(cases):
        raise ConfigError(f"compare.case {c['case']} out of range for {len(cases)} cases")
    case = cases[int(c["case"])]
    e = run.cfg["exchange"]
    exchange = ExchangePosterior(run.prior, run.proposal, run.sim, burn_in=int(e["burn_in"]),
                                 reuse_aux=bool(e["reuse_aux"]))
    h = run.cfg["harness"]
    pair = compare_methods(case, int(c["M"]), model, exchange, run.sim, posterior_draws=int(h["posterior_draws"]),
                           exchange_draws=c["exchange_draws"], seed=run.seed, workers=args.workers)
    paired = run.out / f"paired_case{case.case_id}.csv"
    plot = run.out / f"plot_case{case.case_id}.csv"
    pair.write_paired_csv(paired)
    pair.write_plot_csv(plot, list(run.stats.stat_set))
    diff = pair.mean_abs_difference()
    run.manifest("compare", {"paired": paired, "plot": plot}, case_id=case.case_id,
                 theta_true=np.asarray(case.theta_true).tolist(), mean_abs_difference=diff.tolist())
    print(f"mean |npe - exchange| per coordinate {np.round(diff, 4).tolist()}")
    _render(run)
    return EXIT_OK


def cmd_selftest(run: Run, args) -> int:
    from .selftest import run_selftest

    failed = 0
    for name, ok, detail in run_selftest():
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return EXIT_SELFTEST if failed else EXIT_OK


def cmd_figures(run: Run, args) -> int:
    from .plotting import render_directory

    made = render_directory(args.directory or run.out, list(run.stats.stat_set))
    for path in made:
        print(f"figure {path}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "sample": cmd_sample,
    "exchange": cmd_exchange,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "selftest": cmd_selftest,
    "figures": cmd_figures,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ergmsbi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. sim.n=12 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("-o", "--output-dir", help="directory for outputs")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel simulation workers (results do not depend on it)")
    common.add_argument("--figures", action="store_true", default=None, help="render PNG figures beside the CSVs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a training set")
    p = sub.add_parser("train", parents=[common], help="train an NPE or SNPE model")
    p.add_argument("--mode", choices=("npe", "snpe"), default="npe")
    p.add_argument("--x-obs", help="observed statistics for snpe, comma separated")
    p = sub.add_parser("sample", parents=[common], help="draw posterior samples from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--x-obs", help="observed statistics, comma separated")
    p.add_argument("--count", type=int)
    p.add_argument("--truncate", action="store_true")
    p = sub.add_parser("exchange", parents=[common], help="run an exchange-algorithm chain")
    p.add_argument("--x-obs", help="observed statistics, comma separated")
    for name, text in (("evaluate", "K x M bias evaluation"), ("compare", "NPE versus exchange on one case")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint")
    sub.add_parser("selftest", parents=[common], help="exhaustive-enumeration oracle checks")
    p = sub.add_parser("figures", parents=[common], help="render figures from plot CSVs")
    p.add_argument("directory", nargs="?")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, output_dir=args.output_dir,
                          figures=args.figures)
        run = Run(cfg)
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        if args.command not in ("selftest", "figures"):
            run.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, LeakageError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
