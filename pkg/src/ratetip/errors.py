"""Exception types raised by the numerical routines."""
from __future__ import annotations


class RatetipError(Exception):
    """Base class for all package-specific errors."""


class DivergedBeforeFinalTime(RatetipError):
    """Forward integration blew up before the requested final time.

    For the ramped saddle-node model this signals tipping of the
    deterministic system.
    """

    def __init__(self, t_blowup: float):
        super().__init__(f"trajectory diverged at t = {t_blowup:.6g}")
        self.t_blowup = t_blowup


class BackwardIntegrationDiverged(RatetipError):
    """Backward integration of the separatrix left the admissible region."""


class BracketInvalid(RatetipError):
    """Both bisection endpoints classify identically (no root inside)."""


class DegenerateDensity(RatetipError):
    """Normalization integral of a density underflowed to zero."""


class LinearSolveFailed(RatetipError):
    """The tridiagonal Crank-Nicolson system could not be solved."""


class ThresholdOutsideDomain(RatetipError):
    """A moving threshold left the open spatial domain."""


class ZeroMass(RatetipError):
    """Moments requested of a density with no surviving mass."""


class ZeroVariance(RatetipError):
    """Autocorrelation denominator vanished."""


class TooFewSurvivors(RatetipError):
    """Not enough surviving sample paths for ensemble statistics."""


class NewtonDiverged(RatetipError):
    """Damped Newton failed to reduce the collocation residual."""

    def __init__(self, last_residual: float):
        super().__init__(f"Newton diverged, last residual {last_residual:.3e}")
        self.last_residual = last_residual


class SingularJacobian(RatetipError):
    """Collocation Jacobian was singular or produced non-finite steps."""


class MaxIterations(RatetipError):
    """Newton iteration limit reached without meeting the tolerance."""

    def __init__(self, last_residual: float):
        super().__init__(f"iteration limit reached, residual {last_residual:.3e}")
        self.last_residual = last_residual


class StepUnderflow(RatetipError):
    """Continuation step size shrank below its floor."""

    def __init__(self, param_value: float):
        super().__init__(f"continuation stalled at parameter value {param_value:.6g}")
        self.param_value = param_value


class NoConvergedSeed(RatetipError):
    """Continuation was started from a seed that does not solve the BVP."""


class NoCrossing(RatetipError):
    """A path never crosses the given curve (non-escaping input)."""


class MNotMaximal(RatetipError):
    """A root of the stationarity integral is not a local maximum."""


class InsufficientPoints(RatetipError):
    """Too few converged sweep points for a meaningful fit."""
