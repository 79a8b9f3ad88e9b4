"""Command-line surface: one subcommand per analysis product.

A single JSON config document drives every run; an empty config reproduces
the headline case (ramp speed 1.25, noise level 0.008, ramp height 3,
start at t = -10, domain [-6, 2], reporting step 0.01).  Data files are
named ``<command>_<config-hash>.csv`` and re-running an identical config
rewrites identical bytes (given the seed, for sampling commands); a
``manifest.json`` records the config, versions and wall time.

Exit codes: 0 success, 1 I/O failure, 2 numerical failure, 3 bad config.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, continuation, fokker_planck, indicators, model, sde_mc
from .errors import RatetipError
from .model import ModelParams, RampParams

log = logging.getLogger("ratetip")

DEFAULT_CONFIG: dict = {
    "model": {
        "epsilon": 1.25, "lambda_max": 3.0, "D": 0.008, "t0": -10.0,
        "x0": -1.0, "xT": 4.0, "x_start": -6.0, "x_end": 2.0, "dt": 0.01,
    },
    "grid": {"n_cells": 3200},
    "evolve": {"t_final": 10.0},
    "threshold": {"y": 1.5},
    "ensemble": {"n_paths": 100000, "dt_sim": 0.001, "seed": 0,
                 "initial": "point", "threshold_y": None},
    "path": {"n_intervals": 200},
    "critical_rate": {"tol": 1e-4, "bracket": [1.0, 1.6], "lambda_max": 3.0},
    "sweep": {"epsilon_min": 1.05, "epsilon_max": 1.25, "n_epsilon": 11,
              "D_min": 1e-3, "D_max": 1e-1, "n_D": 40},
    "threshold_sweep": {"y_min": 0.25, "y_max": 2.5, "n_y": 19},
    "domain_sweep": {"x_end_values": [0.5, 1.0, 2.0]},
    "output": {"dir": ".", "format": "csv"},
    "jobs": 1,
}


class ConfigError(Exception):
    pass


def _merge(defaults, override, path=""):
    """Deep-merge override onto defaults, rejecting unknown keys."""
    out = copy.deepcopy(defaults)
    for key, val in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"section {path + key!r} must be an object")
            out[key] = _merge(defaults[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    doc = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, doc)
    for dotted, val in (overrides or {}).items():
        section, key = dotted.split(".")
        if val is not None:
            cfg[section][key] = val
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def model_params(cfg: dict) -> ModelParams:
    m = cfg["model"]
    try:
        return ModelParams(
            ramp=RampParams(epsilon=m["epsilon"], lambda_max=m["lambda_max"]),
            D=m["D"], t0=m["t0"], x0=m["x0"], xT=m["xT"],
            x_start=m["x_start"], x_end=m["x_end"], dt=m["dt"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _grid(cfg: dict, params: ModelParams) -> fokker_planck.Grid1D:
    return fokker_planck.Grid1D(params.x_start, params.x_end,
                                cfg["grid"]["n_cells"])


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(outdir: Path, command: str, cfg: dict, t_start: float,
                    outputs: list[str], results: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "versions": {
            "ratetip": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "wall_time_s": time.time() - t_start,
        "outputs": outputs,
    }
    try:
        import scipy
        doc["versions"]["scipy"] = scipy.__version__
    except ImportError:
        pass
    if results:
        doc["results"] = results
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_critical_rate(cfg: dict) -> int:
    c = cfg["critical_rate"]

    def trace(lo, hi, mid, tipped):
        print(f"  bracket [{lo:.8f}, {hi:.8f}] mid {mid:.8f}: "
              f"{'tips' if tipped else 'tracks'}")

    eps_c = model.find_critical_epsilon(
        ramp_height=c["lambda_max"], tol=c["tol"],
        bracket=tuple(c["bracket"]), on_step=trace)
    print(f"critical ramp speed: {eps_c:.8f} +/- {c['tol']:g}")
    return 0


def cmd_fpe(cfg: dict) -> int:
    t_start = time.time()
    params = model_params(cfg)
    grid = _grid(cfg, params)
    lam0 = model.lambda_of_t(params.t0, params.ramp)
    init = fokker_planck.stationary_density(lam0, params.D, grid, t=params.t0)
    densities, esc = fokker_planck.evolve(init, cfg["evolve"]["t_final"], params)
    curve = fokker_planck.threshold_curve(
        params, cfg["threshold"]["y"], (params.t0, cfg["evolve"]["t_final"]))
    rate = fokker_planck.threshold_crossing_rate(densities, curve, params)
    outdir = _outdir(cfg)
    h = config_hash(cfg)
    names = [f"fpe_density_{h}.csv", f"fpe_escape_{h}.csv",
             f"fpe_threshold_rate_{h}.csv"]
    with open(outdir / names[0], "w", newline="\n") as fh:
        fokker_planck.write_density_csv(fh, densities)
    with open(outdir / names[1], "w", newline="\n") as fh:
        fokker_planck.write_escape_csv(fh, esc)
    with open(outdir / names[2], "w", newline="\n") as fh:
        fokker_planck.write_escape_csv(fh, rate)
    peak = float(rate.times[int(np.argmax(rate.rate))])
    _write_manifest(outdir, "fpe", cfg, t_start, names, {
        "escaped_fraction": 1.0 - densities[-1].mass,
        "threshold_rate_peak_time": peak,
    })
    print(f"escaped fraction {1.0 - densities[-1].mass:.4f}; "
          f"threshold-rate peak at t = {peak:.3f}")
    return 0


def cmd_indicators(cfg: dict) -> int:
    t_start = time.time()
    params = model_params(cfg)
    grid = _grid(cfg, params)
    series = indicators.lag1_series(
        params, (params.t0, cfg["evolve"]["t_final"]), grid=grid)
    base = indicators.ou_baseline(2.0, params.D, params.dt)
    outdir = _outdir(cfg)
    name = f"indicators_{config_hash(cfg)}.csv"
    with open(outdir / name, "w", newline="\n") as fh:
        indicators.write_indicator_csv(fh, series, base)
    _write_manifest(outdir, "indicators", cfg, t_start, [name], {
        "ou_autocorrelation": base.a, "ou_variance": base.V,
    })
    print(f"wrote {name}")
    return 0


def cmd_mc(cfg: dict) -> int:
    t_start = time.time()
    params = model_params(cfg)
    e = cfg["ensemble"]
    config = sde_mc.EnsembleConfig(n_paths=e["n_paths"], dt_sim=e["dt_sim"],
                                   seed=e["seed"], initial=e["initial"])
    threshold = None
    if e["threshold_y"] is not None:
        threshold = fokker_planck.threshold_curve(
            params, e["threshold_y"], (params.t0, cfg["evolve"]["t_final"]))
    result = sde_mc.run_ensemble(config, params,
                                 (params.t0, cfg["evolve"]["t_final"]),
                                 threshold=threshold, n_jobs=cfg["jobs"])
    outdir = _outdir(cfg)
    h = config_hash(cfg)
    names = [f"mc_histogram_{h}.csv", f"mc_indicators_{h}.csv"]
    with open(outdir / names[0], "w", newline="\n") as fh:
        sde_mc.write_escape_histogram_csv(fh, result)
    with open(outdir / names[1], "w", newline="\n") as fh:
        sde_mc.write_mc_indicator_csv(fh, result)
    _write_manifest(outdir, "mc", cfg, t_start, names, {
        "escape_fraction": result.escape_fraction,
    })
    print(f"escape fraction {result.escape_fraction:.4f} "
          f"({config.n_paths} paths, seed {config.seed})")
    return 0


def cmd_path(cfg: dict) -> int:
    t_start = time.time()
    params = model_params(cfg)
    path = continuation.seed_optimal_path(
        params, n_intervals=cfg["path"]["n_intervals"])
    outdir = _outdir(cfg)
    name = f"path_{config_hash(cfg)}.csv"
    from .bvp_path import write_path_csv
    with open(outdir / name, "w", newline="\n") as fh:
        write_path_csv(fh, path)
    _write_manifest(outdir, "path", cfg, t_start, [name], {
        "T_end": path.T_end, "M": path.M, "m": path.m,
    })
    print(f"optimal escape time T_end = {path.T_end:.5f} (M = {path.M:.5f})")
    return 0


def cmd_sweep(cfg: dict) -> int:
    t_start = time.time()
    params = model_params(cfg)
    s = cfg["sweep"]
    eps_vals = np.linspace(s["epsilon_min"], s["epsilon_max"], s["n_epsilon"])
    D_vals = np.logspace(np.log10(s["D_min"]), np.log10(s["D_max"]), s["n_D"])
    grid = continuation.sweep_epsilon_D(
        eps_vals, D_vals, params=params,
        n_intervals=cfg["path"]["n_intervals"], n_jobs=cfg["jobs"])
    outdir = _outdir(cfg)
    name = f"sweep_{config_hash(cfg)}.csv"
    with open(outdir / name, "w", newline="\n") as fh:
        continuation.write_sweep_csv(fh, grid)
    man = f"sweep_manifest_{config_hash(cfg)}.json"
    with open(outdir / man, "w", newline="\n") as fh:
        continuation.write_sweep_manifest(
            fh, grid, policy=continuation.StepPolicy(), tol=1e-10,
            wall_time=time.time() - t_start)
    _write_manifest(outdir, "sweep", cfg, t_start, [name, man], {
        "n_converged": int(np.sum(grid.converged)),
        "n_cells": int(grid.converged.size),
    })
    print(f"sweep converged {int(np.sum(grid.converged))}/{grid.converged.size}")
    return 0


def cmd_threshold_sweep(cfg: dict) -> int:
    t_start = time.time()
    params = model_params(cfg)
    s = cfg["threshold_sweep"]
    y_vals = np.linspace(s["y_min"], s["y_max"], s["n_y"])
    result = fokker_planck.threshold_sweep(
        y_vals, params, (params.t0, cfg["evolve"]["t_final"]),
        grid=_grid(cfg, params))
    outdir = _outdir(cfg)
    name = f"threshold_sweep_{config_hash(cfg)}.csv"
    with open(outdir / name, "w", newline="\n") as fh:
        fh.write("t," + ",".join(f"y={y:.17g}" for y in result.y_values) + "\n")
        for i, t in enumerate(result.times):
            fh.write(f"{t:.17g}," + ",".join(
                f"{v:.17g}" for v in result.rates[i]) + "\n")
    _write_manifest(outdir, "threshold-sweep", cfg, t_start, [name])
    print(f"wrote {name}")
    return 0


def cmd_domain_sweep(cfg: dict) -> int:
    t_start = time.time()
    params = model_params(cfg)
    x_ends = cfg["domain_sweep"]["x_end_values"]
    series_list = indicators.domain_sweep(
        x_ends, params, (params.t0, cfg["evolve"]["t_final"]))
    base = indicators.ou_baseline(2.0, params.D, params.dt)
    outdir = _outdir(cfg)
    h = config_hash(cfg)
    names = []
    for x_end, series in zip(x_ends, series_list):
        name = f"domain_sweep_xend{x_end:g}_{h}.csv"
        with open(outdir / name, "w", newline="\n") as fh:
            indicators.write_indicator_csv(fh, series, base)
        names.append(name)
    _write_manifest(outdir, "domain-sweep", cfg, t_start, names)
    print(f"wrote {len(names)} files")
    return 0


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

_MODEL_FLAGS = ["epsilon", "lambda_max", "D", "t0", "x0", "xT",
                "x_start", "x_end", "dt"]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ratetip",
        description="Escape statistics, early-warning indicators and "
                    "most-likely escape paths for a noisy ramped "
                    "saddle-node system.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--jobs", type=int, metavar="N",
                       default=None, help="parallel workers")
        p.add_argument("--seed", type=int, metavar="U64", default=None)
        for flag in _MODEL_FLAGS:
            p.add_argument(f"--{flag.replace('_', '-')}", type=float,
                           dest=f"model_{flag}", default=None)

    p = sub.add_parser("critical-rate", help="bisect the critical ramp speed")
    common(p)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--bracket", type=float, nargs=2, default=None)

    for name, helptext in [
        ("fpe", "density evolution, escape series, threshold rate"),
        ("indicators", "autocorrelation / variance / decay-rate series"),
        ("mc", "Euler-Maruyama ensemble"),
        ("path", "optimal escape path at (epsilon, D)"),
        ("sweep", "(epsilon, D) sweep of locked optimal paths"),
        ("threshold-sweep", "crossing-rate matrix over threshold offsets"),
        ("domain-sweep", "indicator series over upper boundaries"),
    ]:
        p = sub.add_parser(name, help=helptext)
        common(p)
        if name == "fpe":
            p.add_argument("--y", type=float, default=None,
                           help="threshold offset")
            p.add_argument("--t-final", type=float, default=None)
        if name == "indicators":
            p.add_argument("--t-final", type=float, default=None)
        if name == "mc":
            p.add_argument("--n-paths", type=int, default=None)
            p.add_argument("--dt-sim", type=float, default=None)
            p.add_argument("--threshold-y", type=float, default=None)
            p.add_argument("--t-final", type=float, default=None)
        if name == "path":
            p.add_argument("--n-intervals", type=int, default=None)
    return ap


def _overrides_from(args: argparse.Namespace) -> dict:
    ov: dict[str, object] = {}
    for flag in _MODEL_FLAGS:
        ov[f"model.{flag}"] = getattr(args, f"model_{flag}", None)
    if getattr(args, "out", None) is not None:
        ov["output.dir"] = args.out
    mapping = [
        ("tol", "critical_rate.tol"), ("bracket", "critical_rate.bracket"),
        ("y", "threshold.y"), ("t_final", "evolve.t_final"),
        ("n_paths", "ensemble.n_paths"), ("dt_sim", "ensemble.dt_sim"),
        ("seed", "ensemble.seed"), ("threshold_y", "ensemble.threshold_y"),
        ("n_intervals", "path.n_intervals"),
    ]
    for attr, dotted in mapping:
        val = getattr(args, attr, None)
        if val is not None:
            ov[dotted] = list(val) if isinstance(val, tuple) else val
    return {k: v for k, v in ov.items() if v is not None}


COMMANDS = {
    "critical-rate": cmd_critical_rate,
    "fpe": cmd_fpe,
    "indicators": cmd_indicators,
    "mc": cmd_mc,
    "path": cmd_path,
    "sweep": cmd_sweep,
    "threshold-sweep": cmd_threshold_sweep,
    "domain-sweep": cmd_domain_sweep,
}


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("RATETIP_LOG", "warn").lower()
    logging.basicConfig(level={"error": logging.ERROR, "warn": logging.WARNING,
                               "info": logging.INFO, "debug": logging.DEBUG
                               }.get(level, logging.WARNING))
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(getattr(args, "config", None), _overrides_from(args))
        if getattr(args, "jobs", None) is not None:
            cfg["jobs"] = args.jobs
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except RatetipError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
