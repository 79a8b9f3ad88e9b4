"""Parameter continuation over families of escape-path solutions.

Natural-parameter stepping with adaptive step control drives the three
seeding stages (switch on the velocity equation, move the arrival point
out of the well, stretch the end time), detects sign changes of the
stationarity integral m along the way, refines each root by secant
iteration, and then tracks the locked optimum (m = 0, free end time)
through ramp-speed and noise-level sweeps.  A pseudo-arclength fallback
engages when natural stepping stalls at a fold.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import IO, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from . import model
from .bvp_path import (
    PathSolution, _make_system, adapt_mesh, eval_path, make_seed_path,
    refine_mesh, solve_bvp,
)
from .errors import (
    InsufficientPoints, MNotMaximal, MaxIterations, NewtonDiverged,
    NoConvergedSeed, NoCrossing, RatetipError, SingularJacobian, StepUnderflow,
)
from .fokker_planck import ThresholdCurve
from .model import ModelParams, Trajectory, default_params

__all__ = [
    "StepPolicy", "ContinuationRun", "SweepGrid", "DelayFit", "continue_in",
    "seed_optimal_path", "crossing_time", "sweep_epsilon_D", "delay_law_fit",
    "write_sweep_csv", "write_sweep_manifest",
]

INIT_EPSILON = 1.25   # ramp speed of the seeding stage
INIT_D = 0.05         # noise level of the seeding stage
VALID_EPSILON = (1.0, 4.0 / 3.0)
VALID_D = (1e-3, 0.1)


@dataclass(frozen=True)
class StepPolicy:
    """Adaptive step control: fractions are relative to the parameter span."""

    initial_frac: float = 0.1
    shrink: float = 0.5
    growth: float = 2.0
    growth_after: int = 3
    floor: float = 1e-5
    max_frac: float = 0.4


@dataclass
class ContinuationRun:
    """Accepted solutions and monitored functionals of one continuation."""

    parameter: str
    start: float
    target: float
    solutions: list[PathSolution] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    M_values: list[float] = field(default_factory=list)
    m_values: list[float] = field(default_factory=list)
    brackets: list[tuple[int, int]] = field(default_factory=list)
    roots: list[PathSolution] = field(default_factory=list)
    used_arclength: bool = False

    def record(self, value: float, sol: PathSolution) -> None:
        if self.m_values and np.sign(sol.m) != 0 and \
                np.sign(self.m_values[-1]) * np.sign(sol.m) < 0:
            self.brackets.append((len(self.values) - 1, len(self.values)))
        self.solutions.append(sol)
        self.values.append(value)
        self.M_values.append(sol.M)
        self.m_values.append(sol.m)

    @property
    def final(self) -> PathSolution:
        return self.solutions[-1]


def _solve_at(path: PathSolution, parameter: str, value: float,
              free: tuple[str, ...], fixed: dict[str, float],
              tol: float) -> PathSolution:
    overrides = dict(fixed)
    overrides[parameter] = value
    return solve_bvp(path, fixed=overrides, free=free, tol=tol)


def _arclength_step(path: PathSolution, parameter: str, prev: PathSolution,
                    prev_value: float, value: float, ds: float,
                    free: tuple[str, ...], fixed: dict[str, float],
                    tol: float, max_iter: int = 30) -> tuple[PathSolution, float]:
    """One pseudo-arclength step with the continuation parameter freed.

    The tangent is the secant between the last two accepted solutions; the
    arclength row closes the square system.  Returns the corrected solution
    and the new parameter value.
    """
    free_ext = tuple(free) + (parameter,)
    overrides = dict(fixed)
    overrides[parameter] = value
    sys_, Uv = _make_system(path, overrides, free_ext)
    _, Uv_prev = _make_system(prev, {**fixed, parameter: prev_value}, free_ext)
    tang = Uv - Uv_prev
    nrm = np.linalg.norm(tang)
    if nrm == 0:
        raise NewtonDiverged(np.inf)
    tang /= nrm
    U0 = Uv.copy()
    Uv = Uv + ds * tang
    n = sys_.n
    for _ in range(max_iter):
        R = np.concatenate([sys_.residual(Uv), [tang @ (Uv - U0) - ds]])
        S = np.concatenate([sys_.row_scales(Uv), [1.0]])
        if np.max(np.abs(R) / S) < tol:
            _, sc = sys_.split(Uv)
            sol = _solve_at(path, parameter, sc[parameter], free, fixed, tol)
            return sol, sc[parameter]
        J = sys_.jacobian(Uv).tolil()
        J[n - 1, :] = tang
        try:
            d = spla.spsolve(J.tocsc(), -R)
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from exc
        if not np.all(np.isfinite(d)):
            raise SingularJacobian("non-finite arclength step")
        Uv = Uv + d
    raise MaxIterations(float(np.max(np.abs(R) / S)))


def continue_in(
    parameter: str,
    target: float,
    seed: PathSolution,
    free: tuple[str, ...] = ("m", "M"),
    fixed: dict[str, float] | None = None,
    policy: StepPolicy | None = None,
    log_scale: bool = False,
    refine_roots: bool = True,
    adapt_every: int = 3,
    tol: float = 1e-10,
    root_tol: float = 1e-8,
) -> ContinuationRun:
    """Step ``parameter`` from the seed's value to ``target``.

    Steps halve on Newton failure and double after repeated easy successes;
    on underflow a pseudo-arclength fallback attempts to get past the
    obstruction.  Sign changes of the monitored integral m are bracketed
    and, when ``refine_roots`` is set, polished by secant iteration on m to
    ``root_tol``; refined roots are appended to ``run.roots``.
    """
    policy = policy or StepPolicy()
    fixed = dict(fixed or {})
    if parameter in free:
        raise ValueError("continuation parameter cannot be free")
    start = seed.scalars()[parameter]
    if log_scale and (start <= 0 or target <= 0):
        raise ValueError("log-scale stepping needs positive values")
    xform = (lambda v: np.log(v)) if log_scale else (lambda v: v)
    inv = (lambda u: float(np.exp(u))) if log_scale else (lambda u: float(u))
    try:
        current = _solve_at(seed, parameter, start, free, fixed, tol)
    except RatetipError as exc:
        raise NoConvergedSeed(f"seed does not solve the system: {exc}") from exc
    run = ContinuationRun(parameter=parameter, start=start, target=target)
    run.record(start, current)
    span = abs(xform(target) - xform(start))
    if span == 0.0:
        return run
    step = policy.initial_frac * span
    step_max = policy.max_frac * span
    u_cur = xform(start)
    u_tgt = xform(target)
    direction = np.sign(u_tgt - u_cur)
    streak = 0
    since_adapt = 0
    while abs(u_cur - u_tgt) > 1e-13 * max(1.0, abs(u_tgt)):
        u_next = u_cur + direction * min(step, abs(u_tgt - u_cur))
        value = inv(u_next)
        try:
            nxt = _solve_at(current, parameter, value, free, fixed, tol)
        except (NewtonDiverged, MaxIterations, SingularJacobian):
            step *= policy.shrink
            streak = 0
            if step < policy.floor * span:
                prev = run.solutions[-2] if len(run.solutions) > 1 else current
                prev_val = run.values[-2] if len(run.values) > 1 else run.values[-1]
                try:
                    nxt, new_val = _arclength_step(
                        current, parameter, prev, prev_val, inv(u_cur),
                        ds=max(policy.floor * span, 1e-6), free=free,
                        fixed=fixed, tol=tol)
                    run.used_arclength = True
                    current = nxt
                    u_cur = xform(new_val)
                    run.record(new_val, nxt)
                    step = policy.initial_frac * span
                    continue
                except RatetipError:
                    raise StepUnderflow(inv(u_cur)) from None
            continue
        current = nxt
        u_cur = u_next
        run.record(value, nxt)
        streak += 1
        since_adapt += 1
        if streak >= policy.growth_after:
            step = min(step * policy.growth, step_max)
            streak = 0
        if adapt_every and since_adapt >= adapt_every:
            since_adapt = 0
            try:
                cand = adapt_mesh(current)
                current = _solve_at(cand, parameter, inv(u_cur), free, fixed, tol)
                run.solutions[-1] = current
                run.M_values[-1] = current.M
                run.m_values[-1] = current.m
            except RatetipError:
                pass
    if refine_roots and "m" in free:
        for ia, ib in run.brackets:
            try:
                run.roots.append(_secant_root(
                    run, ia, ib, parameter, free, fixed, tol, root_tol))
            except RatetipError:
                pass
    return run


def _secant_root(run: ContinuationRun, ia: int, ib: int, parameter: str,
                 free: tuple[str, ...], fixed: dict[str, float], tol: float,
                 root_tol: float, max_iter: int = 60) -> PathSolution:
    """Safeguarded secant iteration on m inside a sign-change bracket.

    The candidate comes from the secant through the two most recent
    evaluations; whenever it leaves the bracket the midpoint is used
    instead, and the bracket endpoints always keep opposite signs.
    """
    lo, hi = run.values[ia], run.values[ib]
    m_lo, m_hi = run.m_values[ia], run.m_values[ib]
    if lo > hi:
        lo, hi, m_lo, m_hi = hi, lo, m_hi, m_lo
    prev_v, prev_m = lo, m_lo
    cur_v, cur_m = hi, m_hi
    sol = run.solutions[ib]
    for _ in range(max_iter):
        if cur_m != prev_m:
            c = cur_v - cur_m * (cur_v - prev_v) / (cur_m - prev_m)
        else:
            c = 0.5 * (lo + hi)
        if not lo < c < hi:
            c = 0.5 * (lo + hi)
        sol = _solve_at(sol, parameter, c, free, fixed, tol)
        prev_v, prev_m = cur_v, cur_m
        cur_v, cur_m = c, sol.m
        if abs(sol.m) < root_tol:
            return sol
        if np.sign(cur_m) == np.sign(m_lo):
            lo, m_lo = c, cur_m
        else:
            hi, m_hi = c, cur_m
    raise MaxIterations(abs(sol.m))


# ----------------------------------------------------------------------
# seeding stages and the locked optimum
# ----------------------------------------------------------------------

def _steps123(params: ModelParams, n_intervals: int = 200,
              policy: StepPolicy | None = None, T_end_max: float = 20.0,
              tol: float = 1e-10) -> tuple[PathSolution, ContinuationRun]:
    """Run the three seeding stages at the given (epsilon, D).

    Returns the locked optimal-time solution (m pinned to zero, end time
    free) and the end-time continuation run that located the root.
    """
    seed = make_seed_path(params, n_intervals=n_intervals, x_T=params.x0)
    run1 = continue_in("T_init", 1.0, seed, policy=policy, tol=tol,
                       refine_roots=False)
    run2 = continue_in("xT", params.xT, run1.final, policy=policy, tol=tol,
                       refine_roots=False)
    run3 = continue_in("T_end", T_end_max, run2.final, policy=policy, tol=tol)
    if not run3.roots:
        raise MNotMaximal("no stationary point of M found on the end-time family")
    root = run3.roots[0]
    locked = solve_bvp(root, fixed={"m": 0.0}, free=("T_end", "M"), tol=tol)
    _check_maximal(locked, tol)
    return locked, run3


def _check_maximal(locked: PathSolution, tol: float, delta: float = 0.1) -> None:
    lo = solve_bvp(locked, fixed={"T_end": locked.T_end - delta},
                   free=("m", "M"), tol=tol)
    hi = solve_bvp(locked, fixed={"T_end": locked.T_end + delta},
                   free=("m", "M"), tol=tol)
    if not (locked.M >= lo.M and locked.M >= hi.M):
        raise MNotMaximal(
            f"M({locked.T_end:.4f}) = {locked.M:.6f} is not maximal against "
            f"{lo.M:.6f} and {hi.M:.6f}")


def _polish(path: PathSolution, tol: float, adapt_rounds: int = 2,
            refine: int = 3) -> PathSolution:
    """Final mesh clean-up of a locked optimum: adapt, then refine.

    Brings the midpoint defect of the optimality ODE below 1e-8 while
    leaving the end time unchanged to well below the refinement delta.
    """
    cur = path
    for _ in range(adapt_rounds):
        cur = solve_bvp(adapt_mesh(cur), fixed={"m": 0.0},
                        free=("T_end", "M"), tol=tol)
    if refine > 1:
        cur = solve_bvp(refine_mesh(cur, refine), fixed={"m": 0.0},
                        free=("T_end", "M"), tol=tol)
    return cur


def seed_optimal_path(params: ModelParams, n_intervals: int = 200,
                      policy: StepPolicy | None = None,
                      tol: float = 1e-10, polish: bool = True) -> PathSolution:
    """Optimal-time escape path at the requested (epsilon, D).

    Runs the three seeding stages at the initialization values and then
    continues the locked optimum in ramp speed and noise level to the
    requested point.  The returned solution has m = 0 and locally maximal M.
    """
    eps, D = params.epsilon, params.D
    if not (VALID_EPSILON[0] <= eps < VALID_EPSILON[1]):
        raise ValueError(f"epsilon {eps} outside validated range {VALID_EPSILON}")
    if not (VALID_D[0] <= D <= VALID_D[1]):
        raise ValueError(f"D {D} outside validated range {VALID_D}")
    ramp0 = model.RampParams(epsilon=INIT_EPSILON, lambda_max=params.ramp.lambda_max)
    p0 = replace(params, ramp=ramp0, D=INIT_D)
    locked, _ = _steps123(p0, n_intervals=n_intervals, policy=policy, tol=tol)
    lock_kw = dict(free=("T_end", "M"), fixed={"m": 0.0}, policy=policy,
                   tol=tol, refine_roots=False)
    if eps != INIT_EPSILON:
        locked = continue_in("epsilon", eps, locked, **lock_kw).final
    if D != INIT_D:
        locked = continue_in("D", D, locked, log_scale=True, **lock_kw).final
    if polish:
        locked = _polish(locked, tol)
    _check_maximal(locked, tol)
    return locked


# ----------------------------------------------------------------------
# crossing times
# ----------------------------------------------------------------------

def crossing_time(path: PathSolution, curve: Trajectory | ThresholdCurve,
                  tol: float = 1e-6) -> float:
    """First time the path position crosses the curve, by bisection.

    The path is evaluated through its collocation polynomials; the curve is
    interpolated on its reporting grid.  Raises NoCrossing for paths that
    stay on one side over the overlapping time window.
    """
    t_curve = curve.times
    if isinstance(curve, ThresholdCurve):
        curve_at = curve.at
    else:
        states = curve.states
        curve_at = lambda t: np.interp(t, t_curve, states)
    t0 = max(path.params.t0, float(t_curve[0]))
    t1 = min(path.T_end, float(t_curve[-1]))
    if not t0 < t1:
        raise NoCrossing("path and curve do not overlap in time")
    Ts = path.T_end - path.params.t0

    def gap(t):
        tau = (np.asarray(t, dtype=float) - path.params.t0) / Ts
        return eval_path(path, tau)[0] - curve_at(t)

    tg = np.linspace(t0, t1, 2049)
    g = gap(tg)
    sign_change = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]
    if g[0] == 0.0:
        return float(tg[0])
    if sign_change.size == 0:
        raise NoCrossing("path does not cross the curve")
    lo, hi = tg[sign_change[0]], tg[sign_change[0] + 1]
    glo = g[sign_change[0]]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        gm = float(gap(mid)[0])
        if gm == 0.0:
            return mid
        if np.sign(gm) == np.sign(glo):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------
# two-parameter sweep
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    """Per-cell results of the (ramp speed, noise level) sweep."""

    epsilon_values: np.ndarray
    D_values: np.ndarray
    T_end: np.ndarray
    t_cross: np.ndarray
    M: np.ndarray
    converged: np.ndarray


@dataclass(frozen=True)
class DelayFit:
    epsilon: float
    slope: float
    intercept: float
    r_squared: float
    n_points: int


def _sweep_column(args):
    (col, eps, D_values, base_params, n_intervals, tol) = args
    nD = len(D_values)
    T_end = np.full(nD, np.nan)
    t_cross = np.full(nD, np.nan)
    Mv = np.full(nD, np.nan)
    ok = np.zeros(nD, dtype=bool)
    ramp = model.RampParams(epsilon=eps, lambda_max=base_params.ramp.lambda_max)
    params = replace(base_params, ramp=ramp, D=float(np.max(D_values)))
    try:
        locked, _ = _steps123(params, n_intervals=n_intervals, tol=tol)
    except RatetipError:
        return col, T_end, t_cross, Mv, ok
    separatrix = model.stable_manifold_ws_uplus(params)
    order = np.argsort(D_values)[::-1]
    current = locked
    for j in order:
        D = float(D_values[j])
        try:
            if D != current.params.D:
                current = continue_in("D", D, current, free=("T_end", "M"),
                                      fixed={"m": 0.0}, log_scale=True,
                                      tol=tol, refine_roots=False).final
            T_end[j] = current.T_end
            Mv[j] = current.M
            try:
                t_cross[j] = crossing_time(current, separatrix)
            except NoCrossing:
                t_cross[j] = np.nan
            ok[j] = True
        except RatetipError:
            break
    return col, T_end, t_cross, Mv, ok


def sweep_epsilon_D(epsilon_values: Sequence[float], D_values: Sequence[float],
                    params: ModelParams | None = None, n_intervals: int = 200,
                    n_jobs: int = 1, tol: float = 1e-10) -> SweepGrid:
    """Grid of locked optimal paths over ramp speed and noise level.

    Each ramp-speed column runs the seeding stages once at the largest
    noise level, then continues the locked optimum downward through the
    noise values, recording the end time, the crossing time with the
    separatrix of the post-ramp saddle, and the functional M.  Failed
    cells are flagged and the sweep continues.
    """
    eps_vals = np.asarray(epsilon_values, dtype=float)
    D_vals = np.asarray(D_values, dtype=float)
    if params is None:
        params = default_params()
    jobs = [(i, float(e), D_vals, params, n_intervals, tol)
            for i, e in enumerate(eps_vals)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = sorted(ex.map(_sweep_column, jobs), key=lambda r: r[0])
    else:
        results = [_sweep_column(j) for j in jobs]
    nE, nD = eps_vals.size, D_vals.size
    T_end = np.full((nE, nD), np.nan)
    t_cross = np.full((nE, nD), np.nan)
    M = np.full((nE, nD), np.nan)
    ok = np.zeros((nE, nD), dtype=bool)
    for col, te, tc, mv, okc in results:
        T_end[col], t_cross[col], M[col], ok[col] = te, tc, mv, okc
    return SweepGrid(epsilon_values=eps_vals, D_values=D_vals, T_end=T_end,
                     t_cross=t_cross, M=M, converged=ok)


def delay_law_fit(grid: SweepGrid,
                  D_range: tuple[float, float] | None = None,
                  min_points: int = 10) -> list[DelayFit]:
    """Per-column least-squares fit of t_cross against ln(1/sqrt(2D))."""
    fits = []
    for i, eps in enumerate(grid.epsilon_values):
        sel = grid.converged[i] & np.isfinite(grid.t_cross[i])
        if D_range is not None:
            sel &= (grid.D_values >= D_range[0]) & (grid.D_values <= D_range[1])
        n = int(np.sum(sel))
        if n < min_points:
            raise InsufficientPoints(
                f"only {n} converged points for epsilon = {eps}")
        u = np.log(1.0 / np.sqrt(2.0 * grid.D_values[sel]))
        y = grid.t_cross[i, sel]
        slope, intercept = np.polyfit(u, y, 1)
        resid = y - (slope * u + intercept)
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
        fits.append(DelayFit(epsilon=float(eps), slope=float(slope),
                             intercept=float(intercept), r_squared=r2,
                             n_points=n))
    return fits


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------

def write_sweep_csv(fh: IO[str], grid: SweepGrid) -> None:
    fh.write("epsilon,D,T_end,t_cross,M,converged\n")
    for i, eps in enumerate(grid.epsilon_values):
        for j, D in enumerate(grid.D_values):
            fh.write(f"{eps:.17g},{D:.17g},{grid.T_end[i, j]:.17g},"
                     f"{grid.t_cross[i, j]:.17g},{grid.M[i, j]:.17g},"
                     f"{int(grid.converged[i, j])}\n")


def write_sweep_manifest(fh: IO[str], grid: SweepGrid, *, policy: StepPolicy,
                         tol: float, wall_time: float,
                         extra: dict | None = None) -> None:
    doc = dict(
        epsilon_values=list(map(float, grid.epsilon_values)),
        D_values=list(map(float, grid.D_values)),
        n_converged=int(np.sum(grid.converged)),
        step_policy=dict(initial_frac=policy.initial_frac, shrink=policy.shrink,
                         growth=policy.growth, growth_after=policy.growth_after,
                         floor=policy.floor, max_frac=policy.max_frac),
        tolerance=tol,
        wall_time_s=wall_time,
    )
    doc.update(extra or {})
    json.dump(doc, fh, indent=2, sort_keys=True)
    fh.write("\n")
