"""Closed-form model functions for the noisy ramped saddle-node system.

The deterministic backbone is ``dx/dt = (x + lam)^2 - 1`` where the shift
``lam(t)`` follows a tanh ramp from 0 to ``lambda_max`` with speed ``epsilon``.
This module provides the ramp, the drift, the potential and its derivatives,
the effective potential entering the path-probability functional together
with its closed-form derivatives, equilibria, deterministic trajectories,
the two invariant manifolds of the saddles, and bisection for the critical
ramp speed at which the manifolds form a connecting orbit.

All scalar functions accept numpy arrays and broadcast.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import BackwardIntegrationDiverged, BracketInvalid, DivergedBeforeFinalTime

__all__ = [
    "RampParams", "ModelParams", "EquilibriumSet", "Trajectory", "TrajectoryKind",
    "default_params", "lambda_of_t", "lambda_dot", "ramp_rate", "ramp_rate_dlam",
    "drift", "drift_dx", "potential", "potential_dx", "potential_dxx",
    "potential_dlam", "potential_dlamlam", "potential_dt", "potential_terms",
    "effective_potential", "effective_potential_at_time", "effective_potential_dlam",
    "effective_potential_dlam2", "effective_force", "effective_force_at_time",
    "effective_force_dx", "effective_force_dlam", "effective_force_dxx",
    "effective_force_dxlam", "effective_force_dlam2", "equilibria",
    "deterministic_trajectory", "unstable_manifold_wu_sminus",
    "stable_manifold_ws_uplus", "find_critical_epsilon",
]


@dataclass(frozen=True)
class RampParams:
    """Shape of the parameter shift: height ``lambda_max``, speed ``epsilon``."""

    epsilon: float
    lambda_max: float = 3.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.lambda_max > 0:
            raise ValueError("lambda_max must be positive")


@dataclass(frozen=True)
class ModelParams:
    """Scalar parameters of the stochastic system and its spatial domain."""

    ramp: RampParams
    D: float = 0.008
    t0: float = -10.0
    x0: float = -1.0
    xT: float = 4.0
    x_start: float = -6.0
    x_end: float = 2.0
    dt: float = 0.01

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError("D must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.x_start < self.x0 < self.x_end):
            raise ValueError("x0 must lie strictly inside [x_start, x_end]")

    @property
    def epsilon(self) -> float:
        return self.ramp.epsilon

    @property
    def lambda_max(self) -> float:
        return self.ramp.lambda_max


def default_params(epsilon: float = 1.25, D: float = 0.008, **overrides) -> ModelParams:
    """Headline parameter set: tanh ramp of height 3, domain [-6, 2], dt 0.01."""
    ramp = RampParams(epsilon=epsilon, lambda_max=overrides.pop("lambda_max", 3.0))
    return ModelParams(ramp=ramp, D=D, **overrides)


# ----------------------------------------------------------------------
# ramp profile
# ----------------------------------------------------------------------

def lambda_of_t(t, ramp: RampParams):
    """Ramp value lam(t) = (lambda_max/2) [tanh(lambda_max * epsilon * t / 2) + 1].

    Evaluated in the equivalent logistic form lambda_max / (1 + exp(-u)),
    which keeps full relative precision in the flat tails where the tanh
    form cancels.
    """
    lm = ramp.lambda_max
    u = lm * ramp.epsilon * np.asarray(t, dtype=float)
    with np.errstate(over="ignore"):
        return lm / (1.0 + np.exp(-u))


def lambda_dot(t, ramp: RampParams):
    """Time derivative of the ramp, maximal at t = 0.

    Equals ``epsilon * lam * (lambda_max - lam)`` with ``lam = lambda_of_t(t)``.
    """
    lm = ramp.lambda_max
    s = np.cosh(lm * ramp.epsilon * np.asarray(t, dtype=float) / 2)
    return ramp.epsilon * lm**2 / 4 / s**2


def ramp_rate(lam, ramp: RampParams):
    """Ramp slope as a function of the ramp level: epsilon * lam * (lambda_max - lam)."""
    return ramp.epsilon * lam * (ramp.lambda_max - lam)


def ramp_rate_dlam(lam, ramp: RampParams):
    return ramp.epsilon * (ramp.lambda_max - 2.0 * np.asarray(lam, dtype=float))


# ----------------------------------------------------------------------
# drift and potential
# ----------------------------------------------------------------------

def drift(x, lam):
    """Deterministic drift (x + lam)^2 - 1."""
    return (x + lam) ** 2 - 1.0


def drift_dx(x, lam):
    return 2.0 * (x + lam)


def potential(x, lam):
    """U(x, lam) = -x^3/3 - lam x^2 + (1 - lam^2) x, with drift = -dU/dx."""
    return -(x**3) / 3 - lam * x**2 + (1 - lam**2) * x


def potential_dx(x, lam):
    return -(x**2) - 2 * lam * x + 1 - lam**2


def potential_dxx(x, lam):
    return -2.0 * (x + lam)


def potential_dlam(x, lam):
    return -x * (x + 2 * lam)


def potential_dlamlam(x, lam):
    return -2.0 * np.asarray(x, dtype=float) + 0.0 * lam


def potential_dt(x, lam, ramp: RampParams):
    """Partial time derivative of U through the moving ramp level."""
    return potential_dlam(x, lam) * ramp_rate(lam, ramp)


def potential_terms(x, t, params: ModelParams):
    """Potential and derivatives (U, U_x, U_xx, U_t) at position x and time t."""
    lam = lambda_of_t(t, params.ramp)
    return (
        potential(x, lam),
        potential_dx(x, lam),
        potential_dxx(x, lam),
        potential_dt(x, lam, params.ramp),
    )


# ----------------------------------------------------------------------
# effective potential of the path-probability functional and its force
# ----------------------------------------------------------------------

def effective_potential(x, lam, ramp: RampParams, D: float):
    """Effective potential (1/4D) U_x^2 - U_xx/2 - U_t/(2D) at ramp level lam."""
    ux = potential_dx(x, lam)
    return ux**2 / (4 * D) - potential_dxx(x, lam) / 2 \
        - potential_dlam(x, lam) * ramp_rate(lam, ramp) / (2 * D)


def effective_potential_at_time(x, t, params: ModelParams):
    """Effective potential keyed by time, with the ramp level filled in."""
    return effective_potential(x, lambda_of_t(t, params.ramp), params.ramp, params.D)


def effective_potential_dlam(x, lam, ramp: RampParams, D: float):
    ux, uxx = potential_dx(x, lam), potential_dxx(x, lam)
    r, rp = ramp_rate(lam, ramp), ramp_rate_dlam(lam, ramp)
    return ux * uxx / (2 * D) + 1.0 + (2 * x * r - potential_dlam(x, lam) * rp) / (2 * D)


def effective_potential_dlam2(x, lam, ramp: RampParams, D: float):
    ux, uxx = potential_dx(x, lam), potential_dxx(x, lam)
    rp = ramp_rate_dlam(lam, ramp)
    # d2(ramp_rate)/dlam2 = -2 epsilon
    return (uxx**2 - 2 * ux + 4 * x * rp + 2 * ramp.epsilon * potential_dlam(x, lam)) / (2 * D)


def effective_force(x, lam, ramp: RampParams, D: float):
    """2D times the spatial derivative of the effective potential.

    Closed form: U_x U_xx + 2D - ramp_rate(lam) * U_xx.
    """
    uxx = potential_dxx(x, lam)
    return potential_dx(x, lam) * uxx + 2 * D - ramp_rate(lam, ramp) * uxx


def effective_force_at_time(x, t, params: ModelParams):
    return effective_force(x, lambda_of_t(t, params.ramp), params.ramp, params.D)


def effective_force_dx(x, lam, ramp: RampParams, D: float):
    return potential_dxx(x, lam) ** 2 - 2 * potential_dx(x, lam) + 2 * ramp_rate(lam, ramp)


def effective_force_dlam(x, lam, ramp: RampParams, D: float):
    uxx = potential_dxx(x, lam)
    return uxx**2 - 2 * potential_dx(x, lam) - ramp_rate_dlam(lam, ramp) * uxx \
        + 2 * ramp_rate(lam, ramp)


def effective_force_dxx(x, lam, ramp: RampParams, D: float):
    return -6.0 * potential_dxx(x, lam)


def effective_force_dxlam(x, lam, ramp: RampParams, D: float):
    return -6.0 * potential_dxx(x, lam) + 2 * ramp_rate_dlam(lam, ramp)


def effective_force_dlam2(x, lam, ramp: RampParams, D: float):
    return (-6.0 + 2 * ramp.epsilon) * potential_dxx(x, lam) + 4 * ramp_rate_dlam(lam, ramp)


# ----------------------------------------------------------------------
# equilibria and trajectories
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumSet:
    """The four equilibria (x, lam) of the frozen pre- and post-ramp systems."""

    s_minus: tuple[float, float]
    u_minus: tuple[float, float]
    s_plus: tuple[float, float]
    u_plus: tuple[float, float]


def equilibria(ramp: RampParams) -> EquilibriumSet:
    """Saddle/source on lam = 0 and sink/saddle on lam = lambda_max."""
    lm = ramp.lambda_max
    return EquilibriumSet(
        s_minus=(-1.0, 0.0),
        u_minus=(1.0, 0.0),
        s_plus=(-lm - 1.0, lm),
        u_plus=(-lm + 1.0, lm),
    )


class TrajectoryKind(enum.Enum):
    UNSTABLE_MANIFOLD_WU_SMINUS = "unstable_manifold_WuSminus"
    STABLE_MANIFOLD_WS_UPLUS = "stable_manifold_WsUplus"
    DETERMINISTIC_REFERENCE = "deterministic_reference"


@dataclass(frozen=True)
class Trajectory:
    """A deterministic solution sampled on the reporting grid."""

    times: np.ndarray
    states: np.ndarray
    kind: TrajectoryKind

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly ascending")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("states must be finite")

    def interpolant(self) -> Callable[[np.ndarray], np.ndarray]:
        return lambda t: np.interp(t, self.times, self.states)


def _reporting_grid(t_init: float, t_final: float, dt: float) -> np.ndarray:
    n = int(round((t_final - t_init) / dt))
    return t_init + dt * np.arange(n + 1)


_IVP_OPTS = dict(method="DOP853", rtol=1e-10, atol=1e-10, dense_output=True)


def deterministic_trajectory(
    x_init: float,
    t_init: float,
    t_final: float,
    params: ModelParams,
    blowup: float = 10.0,
    rtol: float = 1e-10,
    atol: float = 1e-10,
    kind: TrajectoryKind = TrajectoryKind.DETERMINISTIC_REFERENCE,
) -> Trajectory:
    """Integrate dx/dt = drift(x, lam(t)) and sample on the reporting grid.

    Raises DivergedBeforeFinalTime when |x| exceeds ``blowup``, which for
    this model signals escape to infinity in finite time.
    """
    if not t_init < t_final:
        raise ValueError("t_init must precede t_final")
    ramp = params.ramp

    def rhs(t, x):
        return drift(x, lambda_of_t(t, ramp))

    def hit_blowup(t, x):
        return np.abs(x[0]) - blowup

    hit_blowup.terminal = True

    opts = dict(_IVP_OPTS)
    opts.update(rtol=rtol, atol=atol)
    sol = solve_ivp(rhs, (t_init, t_final), [x_init], events=hit_blowup, **opts)
    if sol.t_events[0].size > 0:
        raise DivergedBeforeFinalTime(float(sol.t_events[0][0]))
    if not sol.success:
        raise DivergedBeforeFinalTime(float(sol.t[-1]))
    times = _reporting_grid(t_init, t_final, params.dt)
    return Trajectory(times=times, states=sol.sol(times)[0], kind=kind)


def unstable_manifold_wu_sminus(
    params: ModelParams, t_span: tuple[float, float] = (-10.0, 10.0)
) -> Trajectory:
    """Outgoing manifold of the pre-ramp saddle, by forward integration.

    Seeded a distance 1e-8 from x = -1 along the saddle's outgoing
    eigendirection; at |t| = 10 the ramp slope is below integration
    tolerance so the frozen-saddle seed is adequate.
    """
    eps, lm = params.ramp.epsilon, params.ramp.lambda_max
    # unstable eigenvector of the planar saddle at (x, lam) = (-1, 0)
    v = np.array([-2.0 / (2.0 + eps * lm), 1.0])
    xc = -1.0 + 1e-8 * v[0] / np.linalg.norm(v)
    return deterministic_trajectory(
        xc, t_span[0], t_span[1], params,
        kind=TrajectoryKind.UNSTABLE_MANIFOLD_WU_SMINUS,
    )


def stable_manifold_ws_uplus(
    params: ModelParams, t_span: tuple[float, float] = (-10.0, 10.0)
) -> Trajectory:
    """Separatrix of the post-ramp saddle, by backward integration.

    Seeded at distance 1e-8 from x = 1 - lambda_max at the right end of
    ``t_span``; deviations from the separatrix contract in backward time,
    so the trace converges onto it within a few time units.
    """
    ramp = params.ramp
    x_saddle = 1.0 - ramp.lambda_max
    blowup = 10.0

    def rhs(t, x):
        return drift(x, lambda_of_t(t, ramp))

    def hit_blowup(t, x):
        return np.abs(x[0]) - blowup

    hit_blowup.terminal = True

    sol = solve_ivp(rhs, (t_span[1], t_span[0]), [x_saddle + 1e-8],
                    events=hit_blowup, **_IVP_OPTS)
    if sol.t_events[0].size > 0 or not sol.success:
        raise BackwardIntegrationDiverged("separatrix trace left the admissible region")
    times = _reporting_grid(t_span[0], t_span[1], params.dt)
    return Trajectory(times=times, states=sol.sol(times)[0],
                      kind=TrajectoryKind.STABLE_MANIFOLD_WS_UPLUS)


# ----------------------------------------------------------------------
# critical ramp speed
# ----------------------------------------------------------------------

def find_critical_epsilon(
    ramp_height: float = 3.0,
    tol: float = 1e-4,
    bracket: tuple[float, float] = (1.0, 1.6),
    t0: float = -10.0,
    t_final: float = 30.0,
    x_init: float = -1.0,
    rtol: float = 1e-10,
    atol: float = 1e-10,
    on_step: Callable[[float, float, float, bool], None] | None = None,
) -> float:
    """Bisect for the ramp speed at which the deterministic system tips.

    An endpoint classifies as tipping when the trajectory started at
    ``x_init`` diverges before ``t_final``. Raises BracketInvalid when
    both bracket endpoints classify identically.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")

    def tips(eps: float) -> bool:
        params = default_params(epsilon=eps, lambda_max=ramp_height)
        try:
            deterministic_trajectory(x_init, t0, t_final, params, rtol=rtol, atol=atol)
        except DivergedBeforeFinalTime:
            return True
        return False

    lo, hi = bracket
    tips_lo, tips_hi = tips(lo), tips(hi)
    if tips_lo == tips_hi:
        raise BracketInvalid(
            f"both endpoints of {bracket} classify as "
            f"{'tipping' if tips_lo else 'non-tipping'}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        tips_mid = tips(mid)
        if on_step is not None:
            on_step(lo, hi, mid, tips_mid)
        if tips_mid == tips_lo:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
