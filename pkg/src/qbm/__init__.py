"""Quantum Brownian motion in the Markovian regime.

Gaussian-parameter dynamics, a split-step master-equation grid solver,
phase-space quasiprojectors, and decoherence functionals for phase-space
histories, with a config-driven experiment CLI (``qbm``).
"""

__version__ = "0.1.0"

from .core import (
    ConstraintError,
    GaussianState,
    MomentSet,
    PhaseSpaceCell,
    PhysicalParams,
    PotentialModel,
    eval_density,
    eval_potential,
    moments_from_params,
    params_from_moments,
    purity_and_area,
)

__all__ = [
    "__version__",
    "ConstraintError",
    "GaussianState",
    "MomentSet",
    "PhaseSpaceCell",
    "PhysicalParams",
    "PotentialModel",
    "eval_density",
    "eval_potential",
    "moments_from_params",
    "params_from_moments",
    "purity_and_area",
]
