"""Command-line experiment runner.

Every run reads a TOML or JSON config (or a shipped preset), derives all
randomness from one root seed, and writes its artifacts plus a
``manifest.json`` that is enough to reproduce the run exactly. Wall-clock
times go to ``timing.json`` so that manifests of identical runs are equal.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np
import scipy

from . import __version__
from .ces import CESConfig, run_ces
from .design import DesignConfig, run_boed, run_gboed, run_lhs, write_design_log
from .eks import run_eks
from .errors import CalibrationError, ConfigurationError
from .forward import lorenz_forward
from .history_matching import HMConfig, run_hm, write_wave_log
from .lorenz96 import BASE_THETA, DESK_CONFIG, OBSERVABLE_NAMES, L96Config
from .lorenz96 import estimate_obs_covariance, forward
from .mcmc import PosteriorSamples, PriorSpec, STMCMCConfig
from .metrics import MetricRow, convergence_track, metric_rows, read_metrics_csv, write_metrics_csv
from .seeding import child_rng, child_seed

log = logging.getLogger("emucal")

METHODS = ("boed", "gboed", "hm", "ces", "eks", "lhs")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
TOP_LEVEL = {"method", "budget", "seed", "l96", "prior", "truth", "data", "obs", "design", "hm",
             "ces", "eks", "lhs", "mcmc", "convergence", "benchmark"}


# ---------------------------------------------------------------------------
# Config files


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def load_config_file(path):
    """Parse a ``.toml`` or ``.json`` config into a dict."""
    path = str(path)
    try:
        if path.endswith(".json"):
            with open(path) as fh:
                return json.load(fh)
        return _load_toml(path)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except (ValueError, OSError) as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("emucal.presets").iterdir()
                  if p.name.endswith(".toml"))


def load_preset(name):
    res = resources.files("emucal.presets") / f"{name}.toml"
    if not res.is_file():
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    with resources.as_file(res) as path:
        return _load_toml(path)


def apply_override(cfg, assignment):
    """Apply ``dotted.key=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {key!r}: {p!r} is not a table")
    node[parts[-1]] = value
    return cfg


# ---------------------------------------------------------------------------
# Resolved experiment


@dataclass
class ExperimentConfig:
    method: str
    budget: int
    seed: int
    l96: L96Config
    prior: PriorSpec
    truth: np.ndarray = None
    data: dict = None
    obs: dict = field(default_factory=dict)
    method_config: object = None
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self):
        text = json.dumps(self.raw, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _field_error(name, exc):
    return ConfigurationError(f"field '{name}': {exc}")


def _build(cls, name, block):
    try:
        if hasattr(cls, "from_dict"):
            return cls.from_dict(block)
        return cls(**block)
    except TypeError as exc:
        raise _field_error(name, exc) from exc
    except ConfigurationError as exc:
        raise _field_error(name, exc) from exc


def _mcmc_block(raw, name):
    m = dict(raw.get("mcmc", {}))
    m.update(raw.get(name, {}).get("mcmc", {}))
    return m


def method_config(method, budget, raw):
    """Method-specific config, checked against the evaluation budget."""
    mcmc = _mcmc_block(raw, "design" if method in ("boed", "gboed", "lhs") else method)
    if method in ("boed", "gboed", "lhs"):
        block = dict(raw.get("design", {}))
        block.update(raw.get(method, {}) if method == "lhs" else {})
        block.pop("n_lhs_restarts", None)
        block["mcmc"] = mcmc
        cfg = _build(DesignConfig, "design", block)
        if method != "lhs" and budget < cfg.n0:
            raise _field_error("budget", f"{budget} is smaller than design.n0 = {cfg.n0}")
        return cfg
    if method == "hm":
        block = dict(raw.get("hm", {}))
        block["mcmc"] = mcmc
        if "per_wave" not in block:
            waves = int(block.get("waves", HMConfig.waves))
            if budget % waves:
                raise _field_error("hm.waves", f"budget {budget} is not divisible by {waves} waves")
            block["per_wave"] = budget // waves
        cfg = _build(HMConfig, "hm", block)
        if cfg.waves * cfg.per_wave != budget:
            raise _field_error("hm", f"waves * per_wave = {cfg.waves * cfg.per_wave} != budget {budget}")
        return cfg
    if method in ("ces", "eks"):
        block = dict(raw.get(method, {}))
        if "n_ens" not in block:
            n_iter = int(block.get("n_iter", CESConfig.n_iter))
            if budget % n_iter:
                raise _field_error(f"{method}.n_iter", f"budget {budget} is not divisible by {n_iter}")
            block["n_ens"] = budget // n_iter
        if method == "eks":
            allowed = {"n_ens", "n_iter", "dt0", "scheme"}
            unknown = set(block) - allowed
            if unknown:
                raise _field_error("eks", f"unknown options {sorted(unknown)}")
            block.setdefault("n_iter", CESConfig.n_iter)
            cfg = _build(CESConfig, "eks", block)
        else:
            block["mcmc"] = mcmc
            cfg = _build(CESConfig, "ces", block)
        if cfg.budget != budget:
            raise _field_error(method, f"n_ens * n_iter = {cfg.budget} != budget {budget}")
        return cfg
    raise _field_error("method", f"must be one of {', '.join(METHODS)}, got {method!r}")


def resolve(raw, method=None, budget=None, seed=None, desk=False):
    """Validate a raw config dict into an :class:`ExperimentConfig`."""
    raw = copy.deepcopy(raw)
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
    if method is not None:
        raw["method"] = method
    if budget is not None:
        raw["budget"] = int(budget)
    if seed is not None:
        raw["seed"] = int(seed)
    if desk:
        raw["l96"] = DESK_CONFIG.to_dict()
    method = raw.get("method")
    if method not in METHODS:
        raise _field_error("method", f"must be one of {', '.join(METHODS)}, got {method!r}")
    if "budget" not in raw:
        raise _field_error("budget", "missing")
    try:
        budget = int(raw["budget"])
        seed = int(raw.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise _field_error("budget/seed", exc) from exc
    if budget < 2:
        raise _field_error("budget", "must be at least 2")
    l96 = _build(L96Config, "l96", raw.get("l96", {}))
    prior = _build(PriorSpec, "prior", raw["prior"]) if "prior" in raw else PriorSpec.lorenz()
    truth = None
    if "truth" in raw:
        truth = np.asarray(raw["truth"].get("theta", BASE_THETA), float)
        if truth.shape != (prior.d,) or not np.all(np.isfinite(truth)):
            raise _field_error("truth.theta", f"needs {prior.d} finite values")
    data = raw.get("data")
    if truth is None and data is None:
        raise _field_error("truth", "either [truth] (benchmark mode) or [data] (data mode) is required")
    if data is not None and not {"y_obs", "gamma_obs"} <= set(data):
        raise _field_error("data", "needs y_obs and gamma_obs file paths")
    mcfg = method_config(method, budget, raw)
    return ExperimentConfig(method, budget, seed, l96, prior, truth, data, dict(raw.get("obs", {})),
                            mcfg, raw)


# ---------------------------------------------------------------------------
# Running one experiment


def _read_matrix(path):
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2, comments="#",
                          skiprows=1 if _has_header(path) else 0)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc


def _has_header(path):
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        return False
    except ValueError:
        return True


def write_vector(path, values, names):
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        fh.write(",".join(f"{v:.15g}" for v in np.ravel(values)) + "\n")


def write_matrix(path, M, names):
    np.savetxt(path, np.atleast_2d(M), delimiter=",", header=",".join(names), comments="",
               fmt="%.15g")


def observations(exp):
    """``(y_obs, gamma_obs, seeds)`` from the truth (benchmark mode) or files (data mode)."""
    if exp.data is not None:
        y = _read_matrix(exp.data["y_obs"]).ravel()
        gamma = _read_matrix(exp.data["gamma_obs"])
        if gamma.shape != (y.size, y.size):
            raise _field_error("data.gamma_obs", f"shape {gamma.shape} does not match y_obs of length {y.size}")
        return y, gamma, {}
    seeds = {"y_obs": int(exp.obs.get("y_seed", child_seed(exp.seed, "obs", "y"))),
             "gamma_obs": int(exp.obs.get("gamma_seed", child_seed(exp.seed, "obs", "gamma")))}
    y = forward(exp.truth, exp.l96, seeds["y_obs"])
    gamma = estimate_obs_covariance(exp.truth, exp.l96, seed=seeds["gamma_obs"])
    return y, gamma, seeds


def run_method(exp, fwd, y_obs, gamma_obs, budget=None, seed=None, snapshots=None):
    """Dispatch one method; returns posterior samples."""
    budget = exp.budget if budget is None else budget
    seed = child_seed(exp.seed, "method") if seed is None else seed
    cfg = exp.method_config
    if budget != exp.budget:
        cfg = method_config(exp.method, budget, exp.raw)
    if exp.method == "boed":
        return run_boed(budget, exp.prior, fwd, y_obs, gamma_obs, seed, cfg, snapshots)
    if exp.method == "gboed":
        return run_gboed(budget, exp.prior, fwd, y_obs, gamma_obs, seed, cfg, snapshots)
    if exp.method == "lhs":
        restarts = int(exp.raw.get("lhs", {}).get("n_lhs_restarts", 100))
        return run_lhs(budget, exp.prior, fwd, y_obs, gamma_obs, seed, cfg, restarts)
    if exp.method == "hm":
        return run_hm(exp.prior, fwd, y_obs, gamma_obs, seed, cfg)
    if exp.method == "ces":
        return run_ces(cfg, exp.prior, fwd, y_obs, gamma_obs, seed)
    hist = run_eks(exp.prior, cfg.n_ens, cfg.n_iter, fwd, y_obs, gamma_obs, seed=seed, dt0=cfg.dt0,
                   scheme=cfg.scheme)
    return PosteriorSamples(hist[-1].theta, "eks", budget, seed, names=exp.prior.names,
                            info={"history": hist})


def _versions():
    return {"emucal": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def write_artifacts(post, exp, out):
    """Posterior CSV plus the method's logs and emulator."""
    post.to_csv(os.path.join(out, "posterior.csv"))
    info = post.info
    if info.get("design_log"):
        write_design_log(info["design_log"], os.path.join(out, "design_log.csv"))
    if info.get("waves"):
        write_wave_log(info["waves"], os.path.join(out, "waves.csv"))
    if info.get("history"):
        rows = [np.column_stack([np.full(e.n, e.iteration), e.theta,
                                 e.outputs if e.evaluated else np.full((e.n, len(OBSERVABLE_NAMES)), np.nan)])
                for e in info["history"]]
        write_matrix(os.path.join(out, "eks_history.csv"), np.vstack(rows),
                     ["iteration", *exp.prior.names, *OBSERVABLE_NAMES])
    emulator = info.get("emulator") or getattr(info.get("state"), "emulator", None)
    if emulator is not None:
        emulator.to_json(os.path.join(out, "emulator.json"))
    for b, snap in sorted(info.get("snapshots", {}).items()):
        snap.to_csv(os.path.join(out, f"posterior_{b}.csv"))


def run_experiment(exp, out, command=None):
    """Run one configured experiment and write its artifacts to ``out``."""
    os.makedirs(out, exist_ok=True)
    t0 = time.perf_counter()
    y_obs, gamma_obs, obs_seeds = observations(exp)
    write_vector(os.path.join(out, "y_obs.csv"), y_obs, OBSERVABLE_NAMES)
    write_matrix(os.path.join(out, "gamma_obs.csv"), gamma_obs, OBSERVABLE_NAMES)
    seeds = {"root": exp.seed, **obs_seeds, "forward": child_seed(exp.seed, "forward"),
             "method": child_seed(exp.seed, "method")}
    fwd = lorenz_forward(exp.l96, seed=seeds["forward"], budget=exp.budget)
    t1 = time.perf_counter()
    post = run_method(exp, fwd, y_obs, gamma_obs, seed=seeds["method"])
    t2 = time.perf_counter()
    write_artifacts(post, exp, out)
    if exp.truth is not None:
        rows = metric_rows(post, exp.truth, exp.method, exp.budget, exp.seed, t2 - t1)
        write_metrics_csv(rows, os.path.join(out, "metrics.csv"))
    manifest = {
        "command": command or exp.method,
        "method": exp.method,
        "budget": exp.budget,
        "n_evals": fwd.count,
        "blowups": len(fwd.blowups),
        "config": exp.raw,
        "config_hash": exp.config_hash,
        "seeds": seeds,
        "versions": _versions(),
        "mode": "data" if exp.data is not None else "benchmark",
        "n_samples": post.n,
        "status": "ok",
    }
    if "stage_seeds" in post.info:
        manifest["stage_seeds"] = post.info["stage_seeds"]
    _write_json(os.path.join(out, "manifest.json"), manifest)
    _write_json(os.path.join(out, "timing.json"),
                {"observations_s": t1 - t0, "method_s": t2 - t1, "total_s": time.perf_counter() - t0})
    if fwd.count != exp.budget:
        raise CalibrationError(f"{exp.method} used {fwd.count} evaluations, budget {exp.budget}")
    return manifest


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


# ---------------------------------------------------------------------------
# Convergence and benchmark suites


class _Runner:
    """Fresh-run callable for :func:`convergence_track`, with snapshots where supported."""

    def __init__(self, exp, y_obs, gamma_obs, counts):
        self.exp, self.y_obs, self.gamma_obs, self.counts = exp, y_obs, gamma_obs, counts
        if exp.method in ("boed", "gboed"):
            self.with_snapshots = self._snapshots

    def _forward(self, budget):
        fwd = lorenz_forward(self.exp.l96, seed=child_seed(self.exp.seed, "forward"), budget=budget)
        return fwd

    def __call__(self, budget, seed):
        fwd = self._forward(budget)
        post = run_method(self.exp, fwd, self.y_obs, self.gamma_obs, budget, child_seed(seed, "method"))
        self.counts[budget] = fwd.count
        return post

    def _snapshots(self, budget, checkpoints, seed):
        fwd = self._forward(budget)
        post = run_method(self.exp, fwd, self.y_obs, self.gamma_obs, budget,
                          child_seed(seed, "method"), snapshots=checkpoints)
        snaps = dict(post.info["snapshots"])
        snaps[budget] = post
        self.counts[budget] = fwd.count
        return snaps


def run_convergence(exp, out):
    """Metrics at every ``convergence.every`` evaluations up to the budget."""
    os.makedirs(out, exist_ok=True)
    conv = exp.raw.get("convergence", {})
    every = int(conv.get("every", 100))
    checkpoints = conv.get("checkpoints") or list(range(every, exp.budget + 1, every))
    if exp.truth is None:
        raise _field_error("truth", "convergence tracking needs a known truth")
    y_obs, gamma_obs, obs_seeds = observations(exp)
    counts = {}
    rows, events = convergence_track(_Runner(exp, y_obs, gamma_obs, counts), checkpoints,
                                     exp.truth, exp.method, exp.seed)
    write_metrics_csv(rows, os.path.join(out, "convergence.csv"))
    manifest = {"command": "convergence", "method": exp.method, "checkpoints": sorted(checkpoints),
                "n_evals": {str(k): v for k, v in sorted(counts.items())}, "events": events,
                "config": exp.raw, "config_hash": exp.config_hash,
                "seeds": {"root": exp.seed, **obs_seeds}, "versions": _versions(), "status": "ok"}
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return rows


def replicate_thetas(prior, n, seed):
    """Replicate true parameters drawn from the prior box."""
    return prior.sample(child_rng(seed, "replicates"), n)


def run_benchmark(raw, out, seed=None, desk=False):
    """Methods x budgets x replicates; resumable, one consolidated ``metrics.csv``.

    Each cell runs in ``out/cells/<method><budget>_r<i>``. A cell with a
    manifest is skipped on re-runs; failed cells are recorded with NaN rows
    and the suite continues.
    """
    raw = copy.deepcopy(raw)
    bench = raw.pop("benchmark", {})
    methods = bench.get("methods", [raw.get("method", "lhs")])
    budgets = bench.get("budgets", [raw.get("budget", 200)])
    n_rep = int(bench.get("n_replicates", 1))
    root = int(seed if seed is not None else raw.get("seed", 0))
    prior = _build(PriorSpec, "prior", raw["prior"]) if "prior" in raw else PriorSpec.lorenz()
    thetas = replicate_thetas(prior, n_rep, root)
    cells_dir = os.path.join(out, "cells")
    os.makedirs(cells_dir, exist_ok=True)
    # validate every cell before running any
    plans = []
    for method in methods:
        for budget in budgets:
            for i, theta in enumerate(thetas):
                cell = copy.deepcopy(raw)
                cell["truth"] = {"theta": [float(v) for v in theta]}
                cell.pop("data", None)
                exp = resolve(cell, method=method, budget=budget, seed=child_seed(root, "replicate", i),
                              desk=desk)
                plans.append((f"{method}{budget}_r{i}", exp))
    all_rows, ran, skipped = [], [], []
    for name, exp in plans:
        cdir = os.path.join(cells_dir, name)
        if os.path.exists(os.path.join(cdir, "manifest.json")):
            skipped.append(name)
        else:
            ran.append(name)
            try:
                run_experiment(exp, cdir, command="benchmark")
            except CalibrationError as exc:
                log.error("cell %s failed: %s", name, exc)
                os.makedirs(cdir, exist_ok=True)
                write_metrics_csv(_failed_rows(exp), os.path.join(cdir, "metrics.csv"))
                _write_json(os.path.join(cdir, "manifest.json"),
                            {"status": "failed", "error": str(exc), "method": exp.method,
                             "budget": exp.budget, "config": exp.raw})
        all_rows.extend(read_metrics_csv(os.path.join(cdir, "metrics.csv")))
    write_metrics_csv(all_rows, os.path.join(out, "metrics.csv"))
    _write_json(os.path.join(out, "suite.json"),
                {"methods": methods, "budgets": budgets, "n_replicates": n_rep, "seed": root,
                 "replicate_thetas": thetas, "cells": [p[0] for p in plans], "ran": ran,
                 "skipped": skipped})
    return all_rows


def _failed_rows(exp):
    names = [("c" if n == "log_c" else n) for n in exp.prior.names]
    return [MetricRow(exp.method, exp.budget, n, float("nan"), float("nan"), exp.seed, True, 0.0)
            for n in names]


# ---------------------------------------------------------------------------
# Entry point


def _parser():
    p = argparse.ArgumentParser(prog="emucal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, budget=True):
        sp.add_argument("--config", help="TOML or JSON config file")
        sp.add_argument("--preset", help="shipped preset name, e.g. gboed200")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="out", help="output directory")
        if budget:
            sp.add_argument("--budget", type=int)
        sp.add_argument("--desk", action="store_true", help="use the small K=8, J=4 system")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. design.n0=32")

    for name in ("simulate", "obs-cov"):
        sp = sub.add_parser(name, help=f"{'forward run' if name == 'simulate' else 'observation covariance'} at the true parameters")
        common(sp, budget=False)
        sp.add_argument("--theta", type=float, nargs=4, metavar=("H", "F", "LOG_C", "B"))
    for m in METHODS:
        common(sub.add_parser(m, help=f"run {m.upper()} calibration"))
    common(sub.add_parser("benchmark", help="methods x budgets x replicates suite"))
    common(sub.add_parser("convergence", help="metrics every N evaluations"))
    sub.add_parser("presets", help="list shipped presets")
    return p


def _raw_config(args):
    raw = {}
    if args.preset:
        raw = load_preset(args.preset)
    if args.config:
        raw.update(load_config_file(args.config))
    for s in args.set:
        apply_override(raw, s)
    return raw


def _simulate(args, raw):
    l96 = _build(L96Config, "l96", DESK_CONFIG.to_dict() if args.desk else raw.get("l96", {}))
    theta = np.asarray(args.theta if args.theta else raw.get("truth", {}).get("theta", BASE_THETA), float)
    seed = int(args.seed if args.seed is not None else raw.get("seed", 0))
    os.makedirs(args.out, exist_ok=True)
    if args.command == "simulate":
        path = os.path.join(args.out, "y_obs.csv")
        write_vector(path, forward(theta, l96, child_seed(seed, "obs", "y")), OBSERVABLE_NAMES)
    else:
        path = os.path.join(args.out, "gamma_obs.csv")
        write_matrix(path, estimate_obs_covariance(theta, l96, seed=child_seed(seed, "obs", "gamma")),
                     OBSERVABLE_NAMES)
    print(path)


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "presets":
            print("\n".join(preset_names()))
            return EXIT_OK
        raw = _raw_config(args)
        if args.command in ("simulate", "obs-cov"):
            _simulate(args, raw)
        elif args.command == "benchmark":
            if args.budget is not None:
                raw.setdefault("benchmark", {})["budgets"] = [args.budget]
            rows = run_benchmark(raw, args.out, args.seed, args.desk)
            print(f"{len(rows)} metric rows -> {os.path.join(args.out, 'metrics.csv')}")
        else:
            method = None if args.command == "convergence" else args.command
            exp = resolve(raw, method, args.budget, args.seed, args.desk)
            if args.command == "convergence":
                rows = run_convergence(exp, args.out)
                print(f"{len(rows)} metric rows -> {os.path.join(args.out, 'convergence.csv')}")
            else:
                manifest = run_experiment(exp, args.out, command=args.command)
                print(f"{exp.method}: {manifest['n_evals']} evaluations -> {args.out}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
