"""Collocation solver for the most-likely-escape-path boundary-value problem.

The escape path maximizing the path-probability functional solves a second
order two-point problem in rescaled time tau in [0, 1].  Written as a first
order system it consists of six states: position ``x1``, velocity ``x2``,
the ramp level ``lam`` integrated as a state, and the sensitivities
``z1, z2, z3`` of ``(x1, x2, lam)`` with respect to the free end time
``T_end``.  Two integral functionals close the system: ``M``, the log of
the path-probability functional, and ``m``, proportional to -dM/dT_end,
whose roots select the optimal escape time.

Discretization is piecewise-polynomial collocation at Gauss points
(degree 4) on a graded mesh, solved by damped Newton on the sparse
bordered system.  Scalar parameters (``m``, ``M``, ``T_end``, ...) may be
declared free, in which case the two integral conditions close the count.

The tau-derivative of any state equals its physical-time derivative times
``T_end - t0``; ``x2`` itself is the physical velocity dx/dt.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import IO, Iterable, Mapping

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import model
from .errors import MaxIterations, NewtonDiverged, SingularJacobian
from .model import ModelParams

__all__ = [
    "NCOL", "CollocationMesh", "PathSolution", "rhs_extended", "solve_bvp",
    "functional_M", "functional_M_alt", "functional_m", "make_seed_path",
    "adapt_mesh", "refine_mesh", "eval_path", "el_residual", "write_path_csv",
    "SCALAR_NAMES",
]

NCOL = 4
NSTATE = 6
STATE_NAMES = ("x1", "x2", "lam", "z1", "z2", "z3")
SCALAR_NAMES = ("t0", "x0", "xT", "T_init", "T_end", "epsilon", "D", "m", "M")

_glx, _glw = np.polynomial.legendre.leggauss(NCOL)
GAUSS_NODES = (_glx + 1.0) / 2.0
GAUSS_WEIGHTS = _glw / 2.0
_RHO = np.arange(NCOL + 1) / NCOL

# Lagrange basis on the equispaced representation nodes of one interval:
# coefficient arrays, values and first derivatives at the Gauss points, and
# the constant top derivative (order NCOL) used by the mesh monitor.
_LAG = []
_A = np.zeros((NCOL, NCOL + 1))
_B = np.zeros((NCOL, NCOL + 1))
_TOPDER = np.zeros(NCOL + 1)
for _k in range(NCOL + 1):
    _c = np.poly(np.delete(_RHO, _k))
    _c = _c / np.polyval(_c, _RHO[_k])
    _LAG.append(_c)
    _A[:, _k] = np.polyval(_c, GAUSS_NODES)
    _B[:, _k] = np.polyval(np.polyder(_c), GAUSS_NODES)
    _TOPDER[_k] = _c[0] * math.factorial(NCOL)


@dataclass(frozen=True)
class CollocationMesh:
    """Breakpoints of the collocation mesh on [0, 1] with Gauss collocation."""

    breaks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breaks, dtype=float)
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("mesh must span [0, 1]")
        if b.size - 1 < 20:
            raise ValueError("need at least 20 intervals")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breaks", b)

    @classmethod
    def uniform(cls, n_intervals: int = 200) -> "CollocationMesh":
        return cls(np.linspace(0.0, 1.0, n_intervals + 1))

    @property
    def n_intervals(self) -> int:
        return self.breaks.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breaks)

    @property
    def n_points(self) -> int:
        return NCOL * self.n_intervals + 1

    @property
    def rep_tau(self) -> np.ndarray:
        """Representation nodes: NCOL equispaced per interval plus the endpoint."""
        h = self.widths
        inner = (self.breaks[:-1, None] + _RHO[None, :-1] * h[:, None]).ravel()
        return np.concatenate([inner, [1.0]])

    @property
    def colloc_tau(self) -> np.ndarray:
        """Gauss collocation points, shape (n_intervals, NCOL)."""
        return self.breaks[:-1, None] + GAUSS_NODES[None, :] * self.widths[:, None]


@dataclass(frozen=True)
class PathSolution:
    """A converged (or candidate) path on a collocation mesh.

    State arrays live on the mesh representation nodes.  ``M`` and ``m``
    carry the values of the two integral functionals; ``residual`` is the
    scaled Newton residual of the last solve (0.0 for hand-built seeds).
    """

    mesh: CollocationMesh
    x1: np.ndarray
    x2: np.ndarray
    lam: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    T_end: float
    T_init: float
    M: float
    m: float
    params: ModelParams
    residual: float = 0.0

    def states(self) -> np.ndarray:
        return np.stack([self.x1, self.x2, self.lam, self.z1, self.z2, self.z3])

    def scalars(self) -> dict[str, float]:
        p = self.params
        return dict(t0=p.t0, x0=p.x0, xT=p.xT, T_init=self.T_init,
                    T_end=self.T_end, epsilon=p.epsilon, D=p.D, m=self.m, M=self.M)

    @property
    def times(self) -> np.ndarray:
        """Physical times of the representation nodes."""
        return self.params.t0 + self.mesh.rep_tau * (self.T_end - self.params.t0)


def rhs_extended(state, tau, T_end: float, T_init: float, params: ModelParams):
    """Right-hand sides of the six-state system at rescaled time tau.

    ``state`` holds (x1, x2, lam, z1, z2, z3); arrays broadcast.  The z
    equations are the exact T_end-derivatives of the first three, including
    the sensitivity factor on the ramp equation.
    """
    x1, x2, lam, z1, z2, z3 = state
    ramp, D = params.ramp, params.D
    Ts = T_end - params.t0
    h2 = model.effective_force(x1, lam, ramp, D)
    h3 = model.ramp_rate(lam, ramp)
    h2x = model.effective_force_dx(x1, lam, ramp, D)
    h2l = model.effective_force_dlam(x1, lam, ramp, D)
    h3p = model.ramp_rate_dlam(lam, ramp)
    return np.stack(np.broadcast_arrays(
        x2 * Ts,
        h2 * Ts * T_init,
        h3 * Ts,
        x2 + z2 * Ts,
        h2 + (h2x * z1 + h2l * z3) * Ts,
        h3 + h3p * z3 * Ts,
    ))


# ----------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------

class _System:
    """Residual and sparse Jacobian of the collocation discretization."""

    def __init__(self, mesh: CollocationMesh, scalars: Mapping[str, float],
                 free: tuple[str, ...], base_params: ModelParams):
        self.mesh = mesh
        self.scal = dict(scalars)
        self.free = tuple(free)
        self.base_params = base_params
        N, P = mesh.n_intervals, mesh.n_points
        self.N, self.P = N, P
        self.hj = mesh.widths
        self.IDX = NCOL * np.arange(N)[:, None] + np.arange(NCOL + 1)[None, :]
        self.w2 = GAUSS_WEIGHTS[None, :] * self.hj[:, None]
        self.nY = NSTATE * P
        self.n = self.nY + len(self.free)
        # static COO structure of the tau-derivative term
        c_, j_, i_, k_ = np.meshgrid(np.arange(NSTATE), np.arange(N),
                                     np.arange(NCOL), np.arange(NCOL + 1),
                                     indexing="ij")
        self._rows_d = (((c_ * N) + j_) * NCOL + i_).ravel()
        self._cols_d = (c_ * P + self.IDX[j_, k_]).ravel()
        self._vals_d = (_B[i_, k_] / self.hj[j_]).ravel()
        jj, ii, kk = np.meshgrid(np.arange(N), np.arange(NCOL),
                                 np.arange(NCOL + 1), indexing="ij")
        self._rows_f0 = (jj * NCOL + ii).ravel()
        self._cols_f0 = self.IDX[jj, kk].ravel()
        self._Aik = _A[ii, kk].ravel()
        self._jf, self._if = jj.ravel(), ii.ravel()

    # -- packing ------------------------------------------------------
    def pack(self, Y: np.ndarray, scalars: Mapping[str, float]) -> np.ndarray:
        return np.concatenate([Y.ravel(), [scalars[nm] for nm in self.free]])

    def split(self, Uv: np.ndarray):
        Y = Uv[: self.nY].reshape(NSTATE, self.P)
        sc = dict(self.scal)
        for i, nm in enumerate(self.free):
            sc[nm] = Uv[self.nY + i]
        return Y, sc

    # -- evaluation ---------------------------------------------------
    def _ramp_of(self, sc) -> model.RampParams:
        return model.RampParams(epsilon=sc["epsilon"],
                                lambda_max=self.base_params.ramp.lambda_max)

    def colloc_vals(self, Y: np.ndarray):
        Yj = Y[:, self.IDX]
        V = np.einsum("cnk,ik->cni", Yj, _A)
        Dv = np.einsum("cnk,ik->cni", Yj, _B) / self.hj[None, :, None]
        return V, Dv

    def _fields(self, V, sc):
        ramp = self._ramp_of(sc)
        D = sc["D"]
        x1, lam = V[0], V[2]
        return dict(
            ramp=ramp, D=D,
            H2=model.effective_force(x1, lam, ramp, D),
            H3=model.ramp_rate(lam, ramp),
            H2x=model.effective_force_dx(x1, lam, ramp, D),
            H2l=model.effective_force_dlam(x1, lam, ramp, D),
            H3p=model.ramp_rate_dlam(lam, ramp),
            H2xx=model.effective_force_dxx(x1, lam, ramp, D),
            H2xl=model.effective_force_dxlam(x1, lam, ramp, D),
            H2ll=model.effective_force_dlam2(x1, lam, ramp, D),
            VS=model.effective_potential(x1, lam, ramp, D),
            VSL=model.effective_potential_dlam(x1, lam, ramp, D),
            VSLL=model.effective_potential_dlam2(x1, lam, ramp, D),
        )

    def _rhs(self, V, sc, fl):
        Ts = sc["T_end"] - sc["t0"]
        Ti = sc["T_init"]
        x1, x2, lam, z1, z2, z3 = V
        F = np.empty_like(V)
        F[0] = x2 * Ts
        F[1] = fl["H2"] * Ts * Ti
        F[2] = fl["H3"] * Ts
        F[3] = x2 + z2 * Ts
        F[4] = fl["H2"] + (fl["H2x"] * z1 + fl["H2l"] * z3) * Ts
        F[5] = fl["H3"] + fl["H3p"] * z3 * Ts
        return F

    def integrals(self, Y: np.ndarray, sc) -> tuple[float, float]:
        """Gauss-quadrature values of the two functionals (M, m)."""
        ramp = self._ramp_of(sc)
        D = sc["D"]
        Ts = sc["T_end"] - sc["t0"]
        V, _ = self.colloc_vals(Y)
        x1, x2, lam, z1, z2, z3 = V
        w = self.w2
        VS = model.effective_potential(x1, lam, ramp, D)
        VSL = model.effective_potential_dlam(x1, lam, ramp, D)
        H2 = model.effective_force(x1, lam, ramp, D)
        U0 = model.potential(sc["x0"], model.lambda_of_t(sc["t0"], ramp))
        UT = model.potential(sc["xT"], Y[2, -1])
        Mval = (U0 - UT) / (2 * D) - float(np.sum(w * (x2**2 / (4 * D) + VS) * Ts))
        mval = 2 * model.potential_dlam(sc["xT"], Y[2, -1]) * Y[5, -1] + float(np.sum(
            w * (x2**2 + 4 * D * VS + Ts * (2 * x2 * z2 + 2 * H2 * z1 + 4 * D * VSL * z3))))
        return Mval, mval

    def residual(self, Uv: np.ndarray) -> np.ndarray:
        Y, sc = self.split(Uv)
        V, Dv = self.colloc_vals(Y)
        fl = self._fields(V, sc)
        R = (Dv - self._rhs(V, sc, fl)).ravel()
        lam0 = model.lambda_of_t(sc["t0"], fl["ramp"])
        bc = np.array([Y[0, 0] - sc["x0"], Y[0, -1] - sc["xT"], Y[2, 0] - lam0,
                       Y[3, 0], Y[3, -1], Y[5, 0]])
        Mval, mval = self.integrals(Y, sc)
        return np.concatenate([R, bc, [sc["M"] - Mval, sc["m"] - mval]])

    def row_scales(self, Uv: np.ndarray) -> np.ndarray:
        """Per-row magnitudes for the relative convergence test.

        The collocation-row scale sums the absolute assembly terms of the
        derivative stencil, which is the rounding floor of the residual on
        strongly graded meshes.
        """
        Y, sc = self.split(Uv)
        V, Dv = self.colloc_vals(Y)
        fl = self._fields(V, sc)
        F = self._rhs(V, sc, fl)
        d_abs = np.einsum("cnk,ik->cni", np.abs(Y[:, self.IDX]),
                          np.abs(_B)) / self.hj[None, :, None]
        s_coll = (1.0 + d_abs + np.abs(F)).ravel()
        D = sc["D"]
        Ts = abs(sc["T_end"] - sc["t0"])
        U0 = abs(model.potential(sc["x0"], model.lambda_of_t(sc["t0"], fl["ramp"])))
        UT = abs(model.potential(sc["xT"], Y[2, -1]))
        x2 = V[1]
        s_M = 1.0 + (U0 + UT) / (2 * D) + float(
            np.sum(self.w2 * np.abs(x2**2 / (4 * D) + fl["VS"]))) * Ts
        s_m = 1.0 + abs(2 * model.potential_dlam(sc["xT"], Y[2, -1]) * Y[5, -1]) + float(
            np.sum(self.w2 * np.abs(x2**2 + 4 * D * fl["VS"])))
        return np.concatenate([s_coll, np.ones(NSTATE), [s_M, s_m]])

    def jacobian(self, Uv: np.ndarray) -> sp.csc_matrix:
        N, P = self.N, self.P
        Y, sc = self.split(Uv)
        eps, D = sc["epsilon"], sc["D"]
        Ts = sc["T_end"] - sc["t0"]
        Ti = sc["T_init"]
        V, _ = self.colloc_vals(Y)
        fl = self._fields(V, sc)
        x1, x2, lam, z1, z2, z3 = V
        one = np.ones_like(x1)
        JF = {
            (0, 1): Ts * one,
            (1, 0): fl["H2x"] * Ts * Ti, (1, 2): fl["H2l"] * Ts * Ti,
            (2, 2): fl["H3p"] * Ts,
            (3, 1): one, (3, 4): Ts * one,
            (4, 0): fl["H2x"] + (fl["H2xx"] * z1 + fl["H2xl"] * z3) * Ts,
            (4, 2): fl["H2l"] + (fl["H2xl"] * z1 + fl["H2ll"] * z3) * Ts,
            (4, 3): fl["H2x"] * Ts, (4, 5): fl["H2l"] * Ts,
            (5, 2): fl["H3p"] - 2 * eps * z3 * Ts, (5, 5): fl["H3p"] * Ts,
        }
        rows = [self._rows_d]
        cols = [self._cols_d]
        vals = [self._vals_d]
        for (c, d), val in JF.items():
            rows.append(c * N * NCOL + self._rows_f0)
            cols.append(d * P + self._cols_f0)
            vals.append(-(val[self._jf, self._if]) * self._Aik)
        nrow_coll = NSTATE * N * NCOL
        # boundary-condition rows: x1(0), x1(1), lam(0), z1(0), z1(1), z3(0)
        rbc = nrow_coll
        bc_cols = [0, P - 1, 2 * P, 3 * P, 3 * P + P - 1, 5 * P]
        rows.append(rbc + np.arange(NSTATE))
        cols.append(np.array(bc_cols))
        vals.append(np.ones(NSTATE))
        # integral-condition rows
        rM, rm = rbc + NSTATE, rbc + NSTATE + 1
        w = self.w2
        dM = {0: -w * (fl["H2"] / (2 * D)) * Ts,
              1: -w * (x2 / (2 * D)) * Ts,
              2: -w * fl["VSL"] * Ts}
        dm = {0: w * (2 * fl["H2"] + Ts * (2 * fl["H2x"] * z1 + 2 * fl["H2l"] * z3)),
              1: w * (2 * x2 + Ts * 2 * z2),
              2: w * (4 * D * fl["VSL"] + Ts * (2 * fl["H2l"] * z1 + 4 * D * fl["VSLL"] * z3)),
              3: w * Ts * 2 * fl["H2"],
              4: w * Ts * 2 * x2,
              5: w * Ts * 4 * D * fl["VSL"]}
        for row, dd in [(rM, dM), (rm, dm)]:
            for d, val in dd.items():
                contrib = np.einsum("ji,ik->jk", val, _A)
                cidx = (d * P + self.IDX).ravel()
                rows.append(np.full(cidx.size, row))
                cols.append(cidx)
                vals.append(-contrib.ravel())
        UT_l = model.potential_dlam(sc["xT"], Y[2, -1])
        rows.append([rM, rm, rm])
        cols.append([2 * P + P - 1, 2 * P + P - 1, 5 * P + P - 1])
        vals.append([UT_l / (2 * D),
                     -2 * model.potential_dlamlam(sc["xT"], Y[2, -1]) * Y[5, -1],
                     -2 * UT_l])
        # free-parameter columns
        R0 = None
        for ip, nm in enumerate(self.free):
            colidx = self.nY + ip
            if nm == "M":
                rows.append([rM]); cols.append([colidx]); vals.append([1.0])
            elif nm == "m":
                rows.append([rm]); cols.append([colidx]); vals.append([1.0])
            elif nm == "T_end":
                dF = np.empty((NSTATE, N, NCOL))
                dF[0] = x2
                dF[1] = fl["H2"] * Ti
                dF[2] = fl["H3"]
                dF[3] = z2
                dF[4] = fl["H2x"] * z1 + fl["H2l"] * z3
                dF[5] = fl["H3p"] * z3
                rows.append(np.arange(nrow_coll))
                cols.append(np.full(nrow_coll, colidx))
                vals.append(-dF.ravel())
                dMdT = -float(np.sum(w * (x2**2 / (4 * D) + fl["VS"])))
                dmdT = float(np.sum(w * (2 * x2 * z2 + 2 * fl["H2"] * z1
                                         + 4 * D * fl["VSL"] * z3)))
                rows.append([rM, rm]); cols.append([colidx, colidx])
                vals.append([-dMdT, -dmdT])
            else:
                # generic finite-difference column (epsilon, D, xT, T_init, ...)
                if R0 is None:
                    R0 = self.residual(Uv)
                step = 1e-7 * max(1.0, abs(Uv[colidx]))
                Up = Uv.copy()
                Up[colidx] += step
                col = (self.residual(Up) - R0) / step
                nz = np.nonzero(col)[0]
                rows.append(nz); cols.append(np.full(nz.size, colidx))
                vals.append(col[nz])
        rows = np.concatenate([np.asarray(r, dtype=np.int64) for r in rows])
        cols = np.concatenate([np.asarray(c, dtype=np.int64) for c in cols])
        vals = np.concatenate([np.asarray(v, dtype=float) for v in vals])
        return sp.csc_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(self.n, self.n)))


def _make_system(path: PathSolution, fixed: Mapping[str, float],
                 free: tuple[str, ...]) -> tuple[_System, np.ndarray]:
    scalars = path.scalars()
    scalars.update(fixed)
    for nm in free:
        if nm not in SCALAR_NAMES:
            raise ValueError(f"unknown free parameter {nm!r}")
    sys_ = _System(path.mesh, scalars, free, path.params)
    Uv = sys_.pack(path.states(), scalars)
    return sys_, Uv


def _solution_from(sys_: _System, Uv: np.ndarray, path: PathSolution,
                   residual: float) -> PathSolution:
    Y, sc = sys_.split(Uv)
    Mval, mval = sys_.integrals(Y, sc)
    ramp = model.RampParams(epsilon=sc["epsilon"],
                            lambda_max=path.params.ramp.lambda_max)
    params = replace(path.params, ramp=ramp, D=sc["D"], t0=sc["t0"],
                     x0=sc["x0"], xT=sc["xT"])
    return PathSolution(
        mesh=path.mesh, x1=Y[0].copy(), x2=Y[1].copy(), lam=Y[2].copy(),
        z1=Y[3].copy(), z2=Y[4].copy(), z3=Y[5].copy(),
        T_end=sc["T_end"], T_init=sc["T_init"], M=Mval, m=mval,
        params=params, residual=residual,
    )


def solve_bvp(
    initial_guess: PathSolution,
    fixed: Mapping[str, float] | None = None,
    free: Iterable[str] = ("m", "M"),
    constraints: tuple[str, ...] = ("M", "m"),
    tol: float = 1e-10,
    max_iter: int = 50,
) -> PathSolution:
    """Damped Newton on the collocation system.

    ``fixed`` overrides scalar values from the guess; ``free`` names the
    scalars solved for.  The number of free scalars must equal the number
    of imposed integral conditions (both are imposed by default), keeping
    the system square.  Convergence is measured on the row-scaled residual.
    """
    fixed = dict(fixed or {})
    free = tuple(free)
    if len(free) != len(constraints):
        raise ValueError("need as many free scalars as integral conditions")
    sys_, Uv = _make_system(initial_guess, fixed, free)
    nrm = np.inf
    for _ in range(max_iter):
        R = sys_.residual(Uv)
        S = sys_.row_scales(Uv)
        nrm = float(np.max(np.abs(R) / S))
        if nrm < tol:
            return _solution_from(sys_, Uv, initial_guess, nrm)
        J = sys_.jacobian(Uv)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", spla.MatrixRankWarning)
                d = spla.spsolve(J, -R)
        except RuntimeError as exc:
            raise SingularJacobian(str(exc)) from exc
        if not np.all(np.isfinite(d)):
            raise SingularJacobian("non-finite Newton step")
        n0 = float(np.linalg.norm(R / S))
        s = 1.0
        while True:
            Rn = sys_.residual(Uv + s * d)
            if (np.linalg.norm(Rn / S) <= (1 - 1e-4 * s) * n0
                    or np.max(np.abs(Rn) / S) < tol):
                break
            s *= 0.5
            if s < 1e-7:
                raise NewtonDiverged(nrm)
        Uv = Uv + s * d
    raise MaxIterations(nrm)


# ----------------------------------------------------------------------
# functionals
# ----------------------------------------------------------------------

def _quad_system(path: PathSolution) -> _System:
    return _System(path.mesh, path.scalars(), (), path.params)


def functional_M(path: PathSolution) -> float:
    """Log of the path-probability functional, by Gauss quadrature.

    Uses the quadratic velocity cost x2^2/(4D).
    """
    sys_ = _quad_system(path)
    return sys_.integrals(path.states(), path.scalars())[0]


def functional_M_alt(path: PathSolution) -> float:
    """Variant with a linear x2/(4D) velocity term, kept for comparison.

    The quadratic form in :func:`functional_M` is the one consistent with
    the velocity-squared cost of the path functional; this variant exists
    only so both readings can be evaluated side by side.
    """
    sc = path.scalars()
    D, Ts = sc["D"], sc["T_end"] - sc["t0"]
    sys_ = _quad_system(path)
    V, _ = sys_.colloc_vals(path.states())
    x1, x2, lam = V[0], V[1], V[2]
    VS = model.effective_potential(x1, lam, path.params.ramp, D)
    U0 = model.potential(sc["x0"], model.lambda_of_t(sc["t0"], path.params.ramp))
    UT = model.potential(sc["xT"], path.lam[-1])
    return (U0 - UT) / (2 * D) - float(np.sum(sys_.w2 * (x2 / (4 * D) + VS) * Ts))


def functional_m(path: PathSolution) -> float:
    """Stationarity integral: -4D times dM/dT_end along the solution family.

    Zero at critical points of M with respect to the free end time.
    """
    sys_ = _quad_system(path)
    return sys_.integrals(path.states(), path.scalars())[1]


# ----------------------------------------------------------------------
# seeds, evaluation, mesh management
# ----------------------------------------------------------------------

def make_seed_path(params: ModelParams, n_intervals: int = 200,
                   T_end: float | None = None, T_init: float = 0.0,
                   x_T: float | None = None) -> PathSolution:
    """Trivial starting path: rest at x0 with the ramp level filled in.

    With ``T_init = 0`` the velocity equation is switched off and this
    guess converges in a couple of Newton steps.
    """
    mesh = CollocationMesh.uniform(n_intervals)
    if T_end is None:
        T_end = params.t0 + 1.0
    if x_T is not None:
        params = replace(params, xT=x_T)
    tau = mesh.rep_tau
    lam = model.lambda_of_t(params.t0 + tau * (T_end - params.t0), params.ramp)
    zeros = np.zeros_like(tau)
    path = PathSolution(
        mesh=mesh, x1=np.full_like(tau, params.x0), x2=zeros.copy(), lam=lam,
        z1=zeros.copy(), z2=zeros.copy(), z3=zeros.copy(),
        T_end=T_end, T_init=T_init, M=0.0, m=0.0, params=params,
    )
    sys_ = _quad_system(path)
    Mval, mval = sys_.integrals(path.states(), path.scalars())
    return replace(path, M=Mval, m=mval)


def eval_path(path: PathSolution, tau) -> np.ndarray:
    """Evaluate the collocation polynomials at rescaled times tau, shape (6, len)."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    breaks = path.mesh.breaks
    j = np.clip(np.searchsorted(breaks, tau, side="right") - 1, 0,
                path.mesh.n_intervals - 1)
    s = (tau - breaks[j]) / path.mesh.widths[j]
    Y = path.states()[:, (NCOL * j[:, None] + np.arange(NCOL + 1)[None, :])]
    out = np.zeros((NSTATE, tau.size))
    for k in range(NCOL + 1):
        out += Y[:, :, k] * np.polyval(_LAG[k], s)[None, :]
    return out


def el_residual(path: PathSolution) -> float:
    """Max defect of the unscaled second-order optimality ODE at interval midpoints.

    Checks d(x2)/dt - effective_force(x1, lam) on the physical time scale,
    normalized by ``1 + |effective_force|``.
    """
    mesh = path.mesh
    Ts = path.T_end - path.params.t0
    N = mesh.n_intervals
    dx2 = np.zeros(N)
    x1m = np.zeros(N)
    lamm = np.zeros(N)
    Y = path.states()
    for k in range(NCOL + 1):
        idx = NCOL * np.arange(N) + k
        dx2 += Y[1, idx] * np.polyval(np.polyder(_LAG[k]), 0.5) / mesh.widths
        x1m += Y[0, idx] * np.polyval(_LAG[k], 0.5)
        lamm += Y[2, idx] * np.polyval(_LAG[k], 0.5)
    force = model.effective_force(x1m, lamm, path.params.ramp, path.params.D)
    defect = dx2 / Ts - force * path.T_init
    return float(np.max(np.abs(defect) / (1.0 + np.abs(force))))


def _interp_to_mesh(path: PathSolution, mesh: CollocationMesh) -> PathSolution:
    Y = eval_path(path, mesh.rep_tau)
    return replace(path, mesh=mesh, x1=Y[0], x2=Y[1], lam=Y[2],
                   z1=Y[3], z2=Y[4], z3=Y[5])


def refine_mesh(path: PathSolution, factor: int = 2) -> PathSolution:
    """Split every interval ``factor`` ways and interpolate the solution."""
    b = path.mesh.breaks
    fine = np.concatenate([
        np.concatenate([np.linspace(b[j], b[j + 1], factor + 1)[:-1]
                        for j in range(b.size - 1)]),
        [1.0]])
    return _interp_to_mesh(path, CollocationMesh(fine))


def adapt_mesh(path: PathSolution, floor_frac: float = 0.05) -> PathSolution:
    """Redistribute breakpoints to equidistribute the local error monitor.

    The monitor per interval is the jump of the constant order-NCOL
    derivative of the local polynomials across breakpoints, raised to
    1/(NCOL+1), the usual indicator of the collocation truncation error.
    A floor keeps part of the density uniform so smooth regions retain
    resolution.
    """
    mesh = path.mesh
    N = mesh.n_intervals
    Y = path.states()
    idx = NCOL * np.arange(N)[:, None] + np.arange(NCOL + 1)[None, :]
    dm = np.einsum("cnk,k->cn", Y[:, idx], _TOPDER) / mesh.widths[None, :] ** NCOL
    scale = np.max(np.abs(Y), axis=1) + 1.0
    dm = dm / scale[:, None]
    jump = np.abs(np.diff(dm, axis=1))
    gap = 0.5 * (mesh.widths[:-1] + mesh.widths[1:])
    est = np.zeros((NSTATE, N))
    est[:, :-1] = jump / gap
    est[:, 1:] = np.maximum(est[:, 1:], jump / gap)
    s = np.max(est, axis=0) ** (1.0 / (NCOL + 1))
    floor = floor_frac * (np.mean(s) if np.mean(s) > 0 else 1.0) + 1e-12
    density = s + floor
    cum = np.concatenate([[0.0], np.cumsum(density * mesh.widths)])
    cum /= cum[-1]
    new_breaks = np.interp(np.linspace(0, 1, N + 1), cum, mesh.breaks)
    new_breaks[0], new_breaks[-1] = 0.0, 1.0
    new_breaks = np.maximum.accumulate(new_breaks)
    if np.any(np.diff(new_breaks) <= 0):
        return path
    return _interp_to_mesh(path, CollocationMesh(new_breaks))


# ----------------------------------------------------------------------
# export
# ----------------------------------------------------------------------

def write_path_csv(fh: IO[str], path: PathSolution) -> None:
    """CSV with a JSON comment header carrying the scalar metadata."""
    meta = dict(T_end=path.T_end, M=path.M, m=path.m,
                epsilon=path.params.epsilon, D=path.params.D)
    fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    fh.write("tau,t,x1,x2,lam,z1,z2,z3\n")
    tau = path.mesh.rep_tau
    t = path.times
    cols = [tau, t, path.x1, path.x2, path.lam, path.z1, path.z2, path.z3]
    for row in zip(*cols):
        fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
