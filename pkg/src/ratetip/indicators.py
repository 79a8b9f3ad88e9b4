"""Early-warning indicator series computed from the density evolution.

The lag-1 autocorrelation of the surviving population is obtained without
sampling noise by propagating, alongside the density P, the first-moment
weighted field Q(x) = x P(x) through one solver step; the integral of
x Q then yields the joint moment E[X_prev X_cur] of the absorbed process
exactly (up to discretization).  Variance is the second central moment of
the mass-normalized density, so all indicators describe the realizations
that have not yet escaped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import IO, Sequence

import numpy as np

from . import model
from .errors import ZeroVariance
from .fokker_planck import Grid1D, _Stepper, stationary_density
from .model import ModelParams

__all__ = [
    "IndicatorSeries", "OUBaseline", "lag1_series", "ou_baseline",
    "domain_sweep", "kramers_time", "onset_time", "write_indicator_csv",
]

BARRIER_HEIGHT = 4.0 / 3.0   # potential difference between well and barrier
KRAMERS_PREFACTOR = math.pi  # set by the curvatures at the well and barrier


@dataclass(frozen=True)
class IndicatorSeries:
    """Lag-1 autocorrelation, variance and decay-rate estimate over time.

    ``decay_rate`` is (1 - a)/dt, the time-step-free reading of the
    autocorrelation.  ``truncated`` flags series cut short for lack of
    surviving ensemble members (sampling estimators only).
    """

    times: np.ndarray
    autocorrelation: np.ndarray
    variance: np.ndarray
    decay_rate: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        if np.any(np.abs(self.autocorrelation) > 1.0 + 1e-9):
            raise ValueError("autocorrelation outside [-1, 1]")
        if np.any(self.variance < -1e-12):
            raise ValueError("negative variance")


@dataclass(frozen=True)
class OUBaseline:
    """Stationary linear-well reference: decay rate, autocorrelation, variance."""

    theta: float
    a: float
    V: float


def ou_baseline(theta: float, D: float, dt: float) -> OUBaseline:
    """Baseline a = exp(-theta dt), V = D/theta of the linearized well."""
    if theta <= 0 or D <= 0 or dt < 0:
        raise ValueError("theta and D must be positive, dt nonnegative")
    return OUBaseline(theta=theta, a=math.exp(-theta * dt), V=D / theta)


def lag1_series(params: ModelParams, t_span: tuple[float, float],
                grid: Grid1D | None = None) -> IndicatorSeries:
    """Indicator series from the density evolution on ``t_span``.

    Starts from the stationary density at the initial ramp level and steps
    with the reporting step; at each step the density and its first-moment
    weighting are advanced together, giving the covariance of successive
    states of the surviving population.
    """
    if grid is None:
        grid = Grid1D.for_params(params)
    t0, t1 = t_span
    if not t0 < t1:
        raise ValueError("empty time span")
    dt = params.dt
    n = int(round((t1 - t0) / dt))
    x = grid.interior
    h = grid.h
    init = stationary_density(model.lambda_of_t(t0, params.ramp), params.D, grid, t=t0)
    stepper = _Stepper(grid, params)
    PQ = np.stack([init.values, x * init.values], axis=1)
    times = t0 + dt * np.arange(1, n + 1)
    a_arr = np.empty(n)
    v_arr = np.empty(n)
    for k in range(n):
        mass_prev = np.sum(PQ[:, 0]) * h
        mu_prev = np.sum(x * PQ[:, 0]) * h / mass_prev
        var_prev = np.sum(x**2 * PQ[:, 0]) * h / mass_prev - mu_prev**2
        PQ = stepper.advance(PQ, t0 + k * dt, dt)
        mass = np.sum(PQ[:, 0]) * h
        mu = np.sum(x * PQ[:, 0]) * h / mass
        var = np.sum(x**2 * PQ[:, 0]) * h / mass - mu**2
        if var_prev <= 0 or var <= 0:
            raise ZeroVariance(f"variance vanished at t = {times[k]:.4g}")
        e_xx = np.sum(x * PQ[:, 1]) * h / mass
        mu_prev_surv = np.sum(PQ[:, 1]) * h / mass
        cov = e_xx - mu_prev_surv * mu
        a_arr[k] = cov / np.sqrt(var_prev * var)
        v_arr[k] = var
        PQ[:, 1] = x * PQ[:, 0]
    return IndicatorSeries(times=times, autocorrelation=a_arr, variance=v_arr,
                           decay_rate=(1.0 - a_arr) / dt)


def domain_sweep(x_end_values: Sequence[float], params: ModelParams,
                 t_span: tuple[float, float] | None = None,
                 h: float = 0.0025) -> list[IndicatorSeries]:
    """Indicator series recomputed for a family of upper domain boundaries."""
    if t_span is None:
        t_span = (params.t0, -params.t0)
    out = []
    for x_end in x_end_values:
        if not x_end > params.x_start + 1.0:
            raise ValueError("upper boundary too close to lower boundary")
        p = replace(params, x_end=float(x_end))
        grid = Grid1D(p.x_start, p.x_end, int(round((p.x_end - p.x_start) / h)))
        out.append(lag1_series(p, t_span, grid=grid))
    return out


def kramers_time(D: float) -> float:
    """Mean stationary escape time pi * exp(barrier_height / D).

    Returns inf when the exponent overflows the double range.
    """
    if not D > 0:
        raise ValueError("D must be positive")
    arg = BARRIER_HEIGHT / D
    if arg > 700.0:
        return float("inf")
    return KRAMERS_PREFACTOR * math.exp(arg)


def onset_time(times: np.ndarray, values: np.ndarray, direction: str,
               plateau_window: tuple[float, float] = (-6.0, -4.0),
               frac: float = 0.05) -> float:
    """First time a series leaves its early plateau by a fixed fraction.

    ``direction`` is ``"increase"`` (value exceeds plateau mean by frac)
    or ``"decrease"``.  Returns nan when the series never leaves the band.
    """
    times = np.asarray(times)
    values = np.asarray(values)
    sel = (times >= plateau_window[0]) & (times <= plateau_window[1])
    if not np.any(sel):
        raise ValueError("plateau window outside the series")
    base = float(np.mean(values[sel]))
    after = times > plateau_window[1]
    if direction == "increase":
        hit = after & (values > base * (1.0 + frac))
    elif direction == "decrease":
        hit = after & (values < base * (1.0 - frac))
    else:
        raise ValueError("direction must be 'increase' or 'decrease'")
    idx = np.nonzero(hit)[0]
    return float(times[idx[0]]) if idx.size else float("nan")


def write_indicator_csv(fh: IO[str], series: IndicatorSeries,
                        baseline: OUBaseline) -> None:
    fh.write("t,autocorrelation,variance,decay_rate,a_OU,V_OU\n")
    for t, a, v, th in zip(series.times, series.autocorrelation,
                           series.variance, series.decay_rate):
        fh.write(f"{t:.17g},{a:.17g},{v:.17g},{th:.17g},"
                 f"{baseline.a:.17g},{baseline.V:.17g}\n")
