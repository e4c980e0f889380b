"""Flatness-aware Langevin optimization lab.

Objectives, sampler kernels, smoothed surrogates, grid Gibbs measures,
transport distances, curvature probes and a toy noisy-label benchmark.
"""

from .errors import DivergenceError, FlatlandError, QuadratureGuardError, ValidationError
from .gibbs import GridMeasure, GridSpec, build_gibbs, coupling_sweep, kl, mass_in_region
from .harness import ExperimentConfig, run_excess_risk, run_experiment
from .kernels import KernelConfig, Trajectory, run_chain, run_chains, step
from .objective import Objective, make_double_well, make_quadratic, make_quartic, parse_objective
from .smoothing import estimate_g_eps, remainder_expectation, v_value

__version__ = "0.1.0"

__all__ = [
    "DivergenceError",
    "FlatlandError",
    "QuadratureGuardError",
    "ValidationError",
    "GridMeasure",
    "GridSpec",
    "build_gibbs",
    "coupling_sweep",
    "kl",
    "mass_in_region",
    "ExperimentConfig",
    "run_excess_risk",
    "run_experiment",
    "KernelConfig",
    "Trajectory",
    "run_chain",
    "run_chains",
    "step",
    "Objective",
    "make_double_well",
    "make_quadratic",
    "make_quartic",
    "parse_objective",
    "estimate_g_eps",
    "remainder_expectation",
    "v_value",
]
