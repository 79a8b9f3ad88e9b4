"""Noise-driven escape in a ramped saddle-node system.

Subpackages cover the closed-form model (`model`), the density solver and
escape statistics (`fokker_planck`), early-warning indicators
(`indicators`), Euler-Maruyama ensembles (`sde_mc`), the collocation
boundary-value solver for most-likely escape paths (`bvp_path`), and
parameter continuation with two-parameter sweeps (`continuation`).
The command-line surface lives in `cli`.
"""
from . import bvp_path, continuation, errors, fokker_planck, indicators, model, sde_mc
from .model import ModelParams, RampParams, default_params

__version__ = "0.1.0"

__all__ = [
    "bvp_path", "continuation", "errors", "fokker_planck", "indicators",
    "model", "sde_mc", "ModelParams", "RampParams", "default_params",
    "__version__",
]
