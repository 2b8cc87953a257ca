"""Squared-exponential Gaussian prior over cell centers and the
cellwise-constant exponential coefficient field it parametrizes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .mesh import FineMesh


class IllConditionedCovarianceError(RuntimeError):
    """Covariance factorization failed even after jitter escalation."""


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel: variance and per-axis length scales."""

    variance: float
    length_x: float
    length_y: float

    def __post_init__(self):
        if self.variance <= 0.0 or self.length_x <= 0.0 or self.length_y <= 0.0:
            raise ValueError("kernel variance and length scales must be positive")


def rescale_lengths(params: KernelParams, factor: float) -> KernelParams:
    """Multiply both length scales by ``factor``, keeping the variance."""
    if factor <= 0.0:
        raise ValueError("length-scale factor must be positive")
    return replace(params, length_x=params.length_x * factor,
                   length_y=params.length_y * factor)


def kernel_matrix(centers: np.ndarray, params: KernelParams) -> np.ndarray:
    """Dense covariance of the field values at the given points."""
    dx = centers[:, 0:1] - centers[None, :, 0]
    dy = centers[:, 1:2] - centers[None, :, 1]
    return params.variance * np.exp(
        -dx ** 2 / (2.0 * params.length_x ** 2) - dy ** 2 / (2.0 * params.length_y ** 2))


class GaussianPrior:
    """Zero-mean Gaussian over cell-center values, with a Cholesky factor.

    The factor serves both sampling (``L z``) and whitening (triangular solve
    with ``L``), so pCN proposals and the prior quadratic use the same
    factorization.
    """

    def __init__(self, centers: np.ndarray, params: KernelParams, jitter: float | None = None):
        self.centers = np.asarray(centers, dtype=float)
        self.params = params
        cov = kernel_matrix(self.centers, params)
        base = params.variance * 1e-8 if jitter is None else jitter
        if base < 0.0:
            raise ValueError("jitter must be nonnegative")
        jit = base
        chol = None
        while True:
            try:
                chol = sla.cholesky(cov + jit * np.eye(cov.shape[0]), lower=True)
                break
            except sla.LinAlgError:
                jit = max(jit, params.variance * 1e-8) * 10.0
                if jit > params.variance * 1e-4:
                    raise IllConditionedCovarianceError(
                        f"Cholesky failed up to jitter {jit:.2e}")
        self.jitter = jit
        self.covariance = cov + jit * np.eye(cov.shape[0])
        self.factor = chol

    @property
    def dim(self) -> int:
        return self.centers.shape[0]

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw ``xi = L z`` with standard-normal z; shape (dim,) or (size, dim)."""
        if size is None:
            return self.factor @ rng.standard_normal(self.dim)
        z = rng.standard_normal((self.dim, size))
        return (self.factor @ z).T

    def whiten(self, xi: np.ndarray) -> np.ndarray:
        """Solve ``L y = xi``; then ``||y||_2^2`` is the prior quadratic form."""
        return sla.solve_triangular(self.factor, np.asarray(xi, dtype=float).T,
                                    lower=True).T

    def sq_mahalanobis(self, xi: np.ndarray) -> np.ndarray:
        """Prior quadratic ``xi^T Sigma^{-1} xi`` via the stored factor."""
        y = self.whiten(xi)
        return np.sum(y * y, axis=-1)


def build_prior(mesh: FineMesh, params: KernelParams, jitter: float | None = None) -> GaussianPrior:
    """Prior over the mesh's cell centers (one component per fine cell)."""
    return GaussianPrior(mesh.cell_centers(), params, jitter=jitter)


def build_prior_from_centers(centers: np.ndarray, params: KernelParams,
                             jitter: float | None = None) -> GaussianPrior:
    """Prior over explicit center coordinates (local template training)."""
    return GaussianPrior(centers, params, jitter=jitter)


def sample_prior(prior: GaussianPrior, rng: np.random.Generator) -> np.ndarray:
    return prior.sample(rng)


def field_from_xi(mesh: FineMesh, xi: np.ndarray) -> np.ndarray:
    """Cellwise coefficient field exp(xi), one value per fine cell."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (mesh.n_cells,):
        raise ValueError(f"xi must have {mesh.n_cells} entries, got shape {xi.shape}")
    return np.exp(xi)
