"""Shared fixtures: a small trained library reused across test modules."""

import numpy as np
import pytest

from msinvert.ensemble import build_library
from msinvert.gmsfem import build_coarse_grid
from msinvert.mesh import build_fine_mesh
from msinvert.random_field import KernelParams, build_prior

SMALL_PARAMS = KernelParams(variance=0.1, length_x=0.07, length_y=0.07)


@pytest.fixture(scope="session")
def small_problem():
    """20x20 fine / 4x4 coarse problem with a trained M=3, N=10 library."""
    mesh = build_fine_mesh(20, 20)
    grid = build_coarse_grid(mesh, 4, 4)
    lib = build_library(mesh, grid, SMALL_PARAMS, n_local_basis=3, n_terms=10,
                        n_train=100, seed=0)
    return mesh, grid, lib


@pytest.fixture(scope="session")
def small_prior(small_problem):
    mesh, _, _ = small_problem
    return build_prior(mesh, SMALL_PARAMS)


@pytest.fixture(scope="session")
def small_xi(small_problem, small_prior):
    _ = small_problem
    return small_prior.sample(np.random.default_rng(123))
