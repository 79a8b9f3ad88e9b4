"""Shared expensive artifacts, computed once per session."""
from __future__ import annotations

import numpy as np
import pytest

from ratetip import default_params, fokker_planck as fp, model
from ratetip.continuation import _polish, _steps123, seed_optimal_path


@pytest.fixture(scope="session")
def params_008():
    return default_params(epsilon=1.25, D=0.008)


@pytest.fixture(scope="session")
def params_005():
    return default_params(epsilon=1.25, D=0.05)


@pytest.fixture(scope="session")
def fpe_evolution(params_008):
    """Default-headline density evolution on [-10, 10]."""
    p = params_008
    grid = fp.Grid1D.for_params(p)
    lam0 = model.lambda_of_t(p.t0, p.ramp)
    init = fp.stationary_density(lam0, p.D, grid, t=p.t0)
    return fp.evolve(init, 10.0, p)


@pytest.fixture(scope="session")
def threshold_15(params_008):
    return fp.threshold_curve(params_008, 1.5)


@pytest.fixture(scope="session")
def locked_005(params_005):
    """Optimal-time path at the seeding-stage parameter point, polished."""
    locked, run3 = _steps123(params_005, n_intervals=200)
    return _polish(locked, 1e-10), run3


@pytest.fixture(scope="session")
def optimal_008(params_008):
    """Optimal-time path continued to the headline noise level."""
    return seed_optimal_path(params_008)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260808)
