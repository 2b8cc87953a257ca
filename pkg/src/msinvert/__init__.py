"""Ensemble variable-separation multiscale surrogates for Bayesian
identification of discontinuous permeability fields in Darcy flow."""

from .mesh import (
    FineMesh,
    ParabolicProblem,
    build_fine_mesh,
    assemble_affine_stiffness,
    assemble_mass,
    solve_parabolic_fine,
    interpolate_at_points,
)
from .random_field import KernelParams, GaussianPrior, build_prior, sample_prior, field_from_xi
from .gmsfem import CoarseGrid, build_coarse_grid, partition_of_unity
from .ensemble import StochasticBasisLibrary, build_library
from .coarse_model import ForwardSpec, assemble_coarse, solve_parabolic_coarse, forward_map
from .inference import TGPosterior, ChainConfig, run_chain, posterior_stats
from .estimator import MultiscaleSurrogate

__version__ = "0.1.0"

__all__ = [
    "FineMesh",
    "ParabolicProblem",
    "build_fine_mesh",
    "assemble_affine_stiffness",
    "assemble_mass",
    "solve_parabolic_fine",
    "interpolate_at_points",
    "KernelParams",
    "GaussianPrior",
    "build_prior",
    "sample_prior",
    "field_from_xi",
    "CoarseGrid",
    "build_coarse_grid",
    "partition_of_unity",
    "StochasticBasisLibrary",
    "build_library",
    "ForwardSpec",
    "assemble_coarse",
    "solve_parabolic_coarse",
    "forward_map",
    "TGPosterior",
    "ChainConfig",
    "run_chain",
    "posterior_stats",
    "MultiscaleSurrogate",
    "__version__",
]
