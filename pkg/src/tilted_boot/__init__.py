"""Tilted importance-sampling bootstrap for hidden Markov models."""
__version__ = "0.1.0"

from .model import HmmSpec, TransitionMatrix, simulate, simulate_batch, stationary_distribution
from .emissions import Gaussian, Poisson, ZeroModifiedPoisson
from .chain_calculus import chain_moments, solve_poisson, spec_covariance
from .inference import em_fit, log_likelihood
from .tilting import make_region, fixed_point_tilt, solve_strata, build_tilted_kernel
from .bootstrap import coverage_experiment, calibrate_region, stratified_noncoverage

__all__ = [
    "HmmSpec", "TransitionMatrix", "simulate", "simulate_batch", "stationary_distribution",
    "Gaussian", "Poisson", "ZeroModifiedPoisson",
    "chain_moments", "solve_poisson", "spec_covariance",
    "em_fit", "log_likelihood",
    "make_region", "fixed_point_tilt", "solve_strata", "build_tilted_kernel",
    "coverage_experiment", "calibrate_region", "stratified_noncoverage",
]
