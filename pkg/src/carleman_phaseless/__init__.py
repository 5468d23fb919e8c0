"""Phaseless inverse scattering for the 3D Helmholtz equation.

Pipeline: Lippmann-Schwinger forward data, per-wavenumber phase retrieval,
projection onto a Legendre-type basis in ``k``, convexified least squares for
the reduced coefficients, and pointwise recovery of the dielectric constant.
"""
from .basis import BasisSystem, build_basis, compute_tensors
from .carleman import CarlemanParams, build_problem, eval_functional, eval_gradient, init_guess, minimize, solve
from .forward import SCENARIOS, make_medium, measure, scenario_medium
from .grid import Grid3D, build_grid, slab_index
from .phase import extract_cauchy, retrieve_all, retrieve_phase
from .recon import metrics, recover_c
from .reduction import cauchy_coefficients, make_stack

__version__ = "0.1.0"

__all__ = [
    "BasisSystem", "build_basis", "compute_tensors", "CarlemanParams", "build_problem", "eval_functional",
    "eval_gradient", "init_guess", "minimize", "solve", "SCENARIOS", "make_medium", "measure", "scenario_medium",
    "Grid3D", "build_grid", "slab_index", "extract_cauchy", "retrieve_all", "retrieve_phase", "metrics",
    "recover_c", "cauchy_coefficients", "make_stack",
]
