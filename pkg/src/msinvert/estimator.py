"""Scikit-learn style facade over the surrogate forward model.

``MultiscaleSurrogate`` is an estimator whose ``fit`` trains the separated
basis library offline (no data needed, only the prior and the geometry) and
whose ``predict`` maps cellwise log-coefficient vectors to model
observations, row for row.  It composes with sklearn tooling through
``get_params`` / ``set_params`` / ``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_count, check_parameter_array, check_positive
from .coarse_model import case_forward_spec, forward_map
from .ensemble import build_library
from .gmsfem import build_coarse_grid
from .mesh import build_fine_mesh
from .random_field import GaussianPrior, KernelParams, build_prior


class MultiscaleSurrogate(BaseEstimator):
    """Ensemble variable-separation surrogate of a parabolic observation map.

    Parameters
    ----------
    fine_grid, coarse_grid : tuple of int
        Fine cells and coarse elements per axis; the grids must nest.
    variance, length_x, length_y : float
        Squared-exponential prior parameters over cell centers.
    n_local_basis : int
        Multiscale basis functions per coarse neighborhood.
    n_terms : int
        Separated terms kept by the greedy training.
    n_train : int
        Training-set size per neighborhood template.
    forward : dict or None
        Forward-problem layout passed to ``case_forward_spec`` (boundary
        coefficients, source, time stepping, sensors, observation times).
        None selects the default separated-blocks layout.
    random_state : int
        Seed for training-set draws and greedy tie-breaking.
    """

    def __init__(self, fine_grid=(80, 80), coarse_grid=(8, 8), variance=0.1,
                 length_x=0.07, length_y=0.07, n_local_basis=3, n_terms=20,
                 n_train=200, forward=None, random_state=0):
        self.fine_grid = fine_grid
        self.coarse_grid = coarse_grid
        self.variance = variance
        self.length_x = length_x
        self.length_y = length_y
        self.n_local_basis = n_local_basis
        self.n_terms = n_terms
        self.n_train = n_train
        self.forward = forward
        self.random_state = random_state

    def _validated_params(self):
        return dict(
            variance=check_positive("variance", self.variance),
            length_x=check_positive("length_x", self.length_x),
            length_y=check_positive("length_y", self.length_y),
            n_local_basis=check_count("n_local_basis", self.n_local_basis),
            n_terms=check_count("n_terms", self.n_terms),
            n_train=check_count("n_train", self.n_train),
        )

    def fit(self, X=None, y=None):
        """Train the basis library; X and y are ignored (offline training)."""
        p = self._validated_params()
        self.mesh_ = build_fine_mesh(*self.fine_grid)
        self.grid_ = build_coarse_grid(self.mesh_, *self.coarse_grid)
        params = KernelParams(p["variance"], p["length_x"], p["length_y"])
        self.library_ = build_library(self.mesh_, self.grid_, params,
                                      p["n_local_basis"], p["n_terms"],
                                      p["n_train"], seed=int(self.random_state))
        self.spec_ = case_forward_spec(self.mesh_, **(self.forward or {}))
        self.n_features_in_ = self.mesh_.n_cells
        return self

    def _check_fitted(self):
        if not hasattr(self, "library_"):
            raise NotFittedError("MultiscaleSurrogate is not fitted; call fit() first")

    def predict(self, X) -> np.ndarray:
        """Observation vectors for each parameter row, shape (n_samples, n_obs)."""
        self._check_fitted()
        X = check_parameter_array(X, self.n_features_in_, name="X")
        return np.array([forward_map(self.library_, xi, self.spec_) for xi in X])

    def sampling_prior(self) -> GaussianPrior:
        """Full Gaussian prior on the fine cell grid (built on demand)."""
        self._check_fitted()
        params = KernelParams(self.variance, self.length_x, self.length_y)
        return build_prior(self.mesh_, params)
