"""Euler-Maruyama ensembles for the noisy ramped saddle-node system.

Serves as the sampling oracle for the density solver and the indicator
pipeline.  Paths partition into fixed-size chunks; each chunk draws from
its own counter-based stream derived from (seed, chunk index), so results
are bit-identical no matter how chunks are scheduled across workers.
Escaped paths freeze at detection and drop out of the survivor statistics,
mirroring the absorbing boundary of the density solver.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import IO, Literal

import numpy as np

from . import model
from .errors import TooFewSurvivors
from .fokker_planck import Grid1D, ThresholdCurve, stationary_density
from .indicators import IndicatorSeries
from .model import ModelParams

__all__ = [
    "CHUNK", "EnsembleConfig", "EnsembleResult", "run_ensemble",
    "empirical_indicators", "write_escape_histogram_csv",
    "write_mc_indicator_csv",
]

CHUNK = 16384           # fixed chunk size; part of the reproducibility contract
BLOWUP_CLAMP = 50.0
MIN_SURVIVORS = 100


@dataclass(frozen=True)
class EnsembleConfig:
    """Ensemble size, integrator step, stream seed and initial condition."""

    n_paths: int
    dt_sim: float = 1e-3
    seed: int = 0
    initial: Literal["point", "stationary"] = "point"

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("need at least one path")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass(frozen=True)
class EnsembleResult:
    """Survivor statistics on the reporting grid plus escape bookkeeping.

    ``escape_times`` holds the first crossing time per escaped path, of the
    final position when no threshold curve was supplied, otherwise of the
    moving threshold.  ``survivors`` counts paths not yet escaped (final
    position criterion) at each reporting time.
    """

    times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    autocorrelation: np.ndarray
    survivors: np.ndarray
    escape_fraction: float
    escape_times: np.ndarray
    n_paths: int
    seed: int
    dt_sim: float


def _chunk_sizes(n_paths: int) -> list[int]:
    sizes = [CHUNK] * (n_paths // CHUNK)
    if n_paths % CHUNK:
        sizes.append(n_paths % CHUNK)
    return sizes


def _simulate_chunk(args):
    """Simulate one chunk; returns per-step moment sums and escape times."""
    (idx, size, seed, dt_sim, initial, params, t_span, xt_fine, stat_vals,
     stat_cdf) = args
    rng = np.random.default_rng(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(idx,))))
    ramp, D, x_T = params.ramp, params.D, params.xT
    t0, t1 = t_span
    n_sub = int(round(params.dt / dt_sim))
    n_rec = int(round((t1 - t0) / params.dt))
    if initial == "point":
        x = np.full(size, params.x0)
    else:
        u = rng.random(size)
        x = np.interp(u, stat_cdf, stat_vals)
    alive = np.ones(size, dtype=bool)
    esc_time = np.full(size, np.nan)
    cross_time = np.full(size, np.nan)
    sums = np.zeros((n_rec, 6))     # n, sx, sxx, sp, spp, sxp over survivors
    surv = np.zeros(n_rec + 1, dtype=np.int64)
    surv[0] = size
    x_prev = x.copy()
    sigma = np.sqrt(2.0 * D * dt_sim)
    k_fine = 0
    for k in range(n_rec):
        for _ in range(n_sub):
            t = t0 + k_fine * dt_sim
            lam = model.lambda_of_t(t, ramp)
            xn = x + ((x + lam) ** 2 - 1.0) * dt_sim + sigma * rng.standard_normal(size)
            xn = np.where(alive, xn, x)
            k_fine += 1
            tn = t0 + k_fine * dt_sim
            if xt_fine is not None:
                newly_crossed = np.isnan(cross_time) & (xn >= xt_fine[k_fine])
                cross_time[newly_crossed] = tn
            newly_escaped = alive & (xn >= x_T)
            esc_time[newly_escaped] = tn
            xn = np.where(newly_escaped, np.minimum(xn, BLOWUP_CLAMP), xn)
            alive = alive & ~newly_escaped
            x = xn
        surv[k + 1] = int(np.sum(alive))
        xa, pa = x[alive], x_prev[alive]
        sums[k] = (alive.sum(), xa.sum(), (xa * xa).sum(),
                   pa.sum(), (pa * pa).sum(), (xa * pa).sum())
        x_prev = x.copy()
    esc = esc_time[~np.isnan(esc_time)]
    crs = cross_time[~np.isnan(cross_time)]
    return idx, sums, surv, esc, crs


def run_ensemble(config: EnsembleConfig, params: ModelParams,
                 t_span: tuple[float, float],
                 threshold: ThresholdCurve | None = None,
                 n_jobs: int = 1) -> EnsembleResult:
    """Simulate the ensemble and reduce survivor statistics per step.

    Increments are sqrt(2 D dt) standard normals; a path counts as escaped
    at its first time at or beyond the final position and freezes there.
    Identical (seed, config, params) give bit-identical results.
    """
    if config.dt_sim > params.dt + 1e-15:
        raise ValueError("dt_sim must not exceed the reporting step")
    n_sub = int(round(params.dt / config.dt_sim))
    if abs(n_sub * config.dt_sim - params.dt) > 1e-9 * params.dt:
        raise ValueError("reporting step must be a multiple of dt_sim")
    t0, t1 = t_span
    n_rec = int(round((t1 - t0) / params.dt))
    times = t0 + params.dt * np.arange(n_rec + 1)
    xt_fine = None
    if threshold is not None:
        t_fine = t0 + config.dt_sim * np.arange(n_rec * n_sub + 1)
        xt_fine = threshold.at(t_fine)
    stat_vals = stat_cdf = None
    if config.initial == "stationary":
        grid = Grid1D.for_params(params)
        dens = stationary_density(model.lambda_of_t(t0, params.ramp),
                                  params.D, grid, t=t0)
        cdf = np.cumsum(dens.values) * grid.h
        cdf = cdf / cdf[-1]
        stat_vals, stat_cdf = grid.interior, cdf
    sizes = _chunk_sizes(config.n_paths)
    jobs = [(i, sz, config.seed, config.dt_sim, config.initial, params,
             (t0, t1), xt_fine, stat_vals, stat_cdf)
            for i, sz in enumerate(sizes)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = sorted(ex.map(_simulate_chunk, jobs), key=lambda r: r[0])
    else:
        results = [_simulate_chunk(j) for j in jobs]
    sums = np.zeros((n_rec, 6))
    surv = np.zeros(n_rec + 1, dtype=np.int64)
    esc_parts, crs_parts = [], []
    for _, s, sv, esc, crs in results:
        sums += s
        surv += sv
        esc_parts.append(esc)
        crs_parts.append(crs)
    esc_times = np.sort(np.concatenate(esc_parts)) if esc_parts else np.array([])
    crs_times = np.sort(np.concatenate(crs_parts)) if crs_parts else np.array([])
    with np.errstate(invalid="ignore", divide="ignore"):
        n = sums[:, 0]
        mean = sums[:, 1] / n
        var = sums[:, 2] / n - mean**2
        mean_p = sums[:, 3] / n
        var_p = sums[:, 4] / n - mean_p**2
        cov = sums[:, 5] / n - mean * mean_p
        acf = cov / np.sqrt(var * var_p)
    reported = crs_times if threshold is not None else esc_times
    return EnsembleResult(
        times=times[1:], mean=mean, variance=var, autocorrelation=acf,
        survivors=surv[1:], escape_fraction=reported.size / config.n_paths,
        escape_times=reported, n_paths=config.n_paths, seed=config.seed,
        dt_sim=config.dt_sim,
    )


def empirical_indicators(result: EnsembleResult,
                         dt_report: float | None = None) -> IndicatorSeries:
    """Package the sampled survivor statistics as an indicator series.

    The series is truncated (and flagged) from the first step with fewer
    than 100 survivors; a degenerate ensemble raises TooFewSurvivors.
    """
    dt = float(result.times[1] - result.times[0]) if result.times.size > 1 else None
    if dt_report is None:
        dt_report = dt
    stride = 1 if dt is None else max(1, int(round(dt_report / dt)))
    if result.n_paths < MIN_SURVIVORS:
        raise TooFewSurvivors(f"ensemble of {result.n_paths} paths is too small")
    low = np.nonzero(result.survivors < MIN_SURVIVORS)[0]
    end = int(low[0]) if low.size else result.times.size
    truncated = bool(low.size)
    if end == 0:
        raise TooFewSurvivors("fewer than 100 survivors from the first step")
    sl = slice(0, end, stride)
    a = result.autocorrelation[sl]
    return IndicatorSeries(
        times=result.times[sl], autocorrelation=a,
        variance=result.variance[sl],
        decay_rate=(1.0 - a) / (dt * stride if dt else 1.0),
        truncated=truncated,
    )


def _meta_line(result: EnsembleResult) -> str:
    return "# " + json.dumps(dict(seed=result.seed, n_paths=result.n_paths,
                                  dt_sim=result.dt_sim), sort_keys=True)


def write_escape_histogram_csv(fh: IO[str], result: EnsembleResult,
                               bin_width: float = 0.25) -> None:
    fh.write(_meta_line(result) + "\n")
    fh.write("bin_left,bin_right,count\n")
    if result.escape_times.size == 0:
        return
    lo = np.floor(result.escape_times.min() / bin_width) * bin_width
    hi = np.ceil(result.escape_times.max() / bin_width) * bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, _ = np.histogram(result.escape_times, bins=edges)
    for left, right, c in zip(edges[:-1], edges[1:], counts):
        fh.write(f"{left:.17g},{right:.17g},{int(c)}\n")


def write_mc_indicator_csv(fh: IO[str], result: EnsembleResult) -> None:
    fh.write(_meta_line(result) + "\n")
    fh.write("t,mean,variance,autocorrelation,survivors\n")
    for t, mu, v, a, s in zip(result.times, result.mean, result.variance,
                              result.autocorrelation, result.survivors):
        fh.write(f"{t:.17g},{mu:.17g},{v:.17g},{a:.17g},{int(s)}\n")
