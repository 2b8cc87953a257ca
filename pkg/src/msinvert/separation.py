"""Greedy variable separation for local Dirichlet problems over an affine
parametric operator.

The target local problem on a patch omega is ``a(phi, v; xi) = 0`` with
``phi = phi_bar`` on the patch boundary, where
``a(w, v; xi) = sum_p exp(xi_p) a_p(w, v)`` has one piece per fine cell.
Writing ``phi = phi0 + lift`` with the zero-extended boundary lift, the
homogeneous part is approximated by the separated form

    phi0(x; xi) ~= sum_q Phi_q(x) * eta_q(xi),

built greedily: at step k a training sample is selected (randomly at k = 1,
by the largest residual-Riesz indicator afterwards), the residual equation is
solved for the new physical basis Phi_k, and the stochastic coefficients
eta_k are given by a denominator-normalized recursion over stored piecewise
energies, so online evaluation never touches a fine-grid-sized object.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .mesh import AffineOperator, FineMesh


class DegenerateDenominatorError(RuntimeError):
    """The eta recursion met a nonpositive denominator."""


class IndicatorError(RuntimeError):
    """The error indicator evaluated to a non-finite value."""

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


@dataclass
class EtaRule:
    """Stored piecewise energies that evaluate the interpolation coefficients.

    ``b[k, p] = a_p(lift, Phi_k)`` and ``inter[k, q, p] = a_p(Phi_q, Phi_k)``;
    with ``kappa = exp(xi)`` the recursion is

        eta_k = -( b[k] . kappa + sum_{q<k} eta_q * inter[k, q] . kappa )
                / ( inter[k, k] . kappa ),

    which reproduces the residual correction exactly at the selected samples
    (eta_k(xi^k) = 1).  Evaluation cost depends only on (N, m_a).
    """

    b: np.ndarray
    inter: np.ndarray

    @property
    def n_terms(self) -> int:
        return self.b.shape[0]

    @property
    def n_pieces(self) -> int:
        return self.b.shape[1]

    def eval_many(self, xi: np.ndarray, n_terms: int | None = None) -> np.ndarray:
        """Coefficients for a batch of parameters, shape (n_samples, n_terms)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        k = self.n_terms if n_terms is None else n_terms
        kap = np.exp(xi)
        t = np.einsum("kqp,sp->skq", self.inter[:k, :k], kap)
        bk = kap @ self.b[:k].T
        eta = np.zeros((xi.shape[0], k))
        for m in range(k):
            denom = t[:, m, m]
            if np.any(denom <= 0.0):
                raise DegenerateDenominatorError(
                    f"nonpositive denominator at term {m + 1}")
            acc = bk[:, m].copy()
            if m:
                acc += np.einsum("sq,sq->s", eta[:, :m], t[:, m, :m])
            eta[:, m] = -acc / denom
        return eta

    def __call__(self, xi: np.ndarray, n_terms: int | None = None) -> np.ndarray:
        return self.eval_many(np.asarray(xi)[None, :], n_terms=n_terms)[0]


@dataclass
class SeparatedRepresentation:
    """Physical bases plus the machinery for indicator and online evaluation."""

    patch: FineMesh = field(repr=False)
    lift: np.ndarray = field(repr=False)          # zero-extended boundary data
    phi: np.ndarray = field(repr=False)           # (n_nodes, N), zero trace
    samples: np.ndarray = field(repr=False)       # (N, m_a) selected parameters
    eta_rule: EtaRule = field(repr=False)
    eta_at_samples: np.ndarray = field(repr=False)  # (N, N) lower-triangular-ish
    vmat: object = field(repr=False)              # V inner product on free dofs (CSR)
    riesz_lift: np.ndarray = field(repr=False)    # (n_free, m_a)
    riesz_phi: list = field(repr=False)           # N arrays (n_free, m_a)
    indicator_history: np.ndarray = field(repr=False)  # max indicator before each step

    @property
    def n_terms(self) -> int:
        return self.phi.shape[1]

    def eval_eta(self, xi: np.ndarray) -> np.ndarray:
        return self.eta_rule(xi)

    def eval_solution(self, xi: np.ndarray) -> np.ndarray:
        """Separated-form field; equals the boundary data exactly on the trace."""
        return self.phi @ self.eta_rule(xi) + self.lift

    def vnorm(self, fld: np.ndarray) -> float:
        f = fld[self.patch.interior_nodes]
        return float(np.sqrt(f @ (self.vmat @ f)))

    def error_indicator(self, xi: np.ndarray, n_terms: int | None = None) -> float:
        """Squared V-norm of the Riesz-lifted residual, no PDE solve involved."""
        k = self.n_terms if n_terms is None else n_terms
        kap = np.exp(np.asarray(xi, dtype=float))
        t = self.riesz_lift @ kap
        if k:
            eta = self.eta_rule(xi, n_terms=k)
            for q in range(k):
                t += eta[q] * (self.riesz_phi[q] @ kap)
        val = float(t @ (self.vmat @ t))
        if not np.isfinite(val):
            raise IndicatorError("error indicator is not finite")
        return val


def vs_greedy(patch: FineMesh, op: AffineOperator, lift: np.ndarray,
              train: np.ndarray, n_terms: int, rng: np.random.Generator,
              indicator_tol: float | None = None,
              min_basis_vnorm: float = 1e-12) -> SeparatedRepresentation:
    """Greedy construction of the separated representation.

    ``train`` holds the training parameter set, one sample per row.  The
    returned representation interpolates the direct solve at every selected
    sample.  Training stops early when the manifold is exhausted (new basis
    V-norm below ``min_basis_vnorm``) or, if ``indicator_tol`` is given, when
    the worst training indicator drops below it.
    """
    train = np.atleast_2d(np.asarray(train, dtype=float))
    n_samp = train.shape[0]
    if n_terms > n_samp:
        raise ValueError(f"cannot select {n_terms} terms from {n_samp} training samples")
    if lift.shape != (patch.n_nodes,):
        raise ValueError("lift must be defined on all patch nodes")

    free = patch.interior_nodes
    k0_full = op.assemble(np.ones(op.n_pieces))
    vmat = k0_full[np.ix_(free, free)].tocsc()
    v_factor = spla.splu(vmat)
    kappa_train = np.exp(train)

    m_a = op.n_pieces
    phi = np.zeros((patch.n_nodes, n_terms))
    samples = np.zeros((n_terms, m_a))
    b = np.zeros((n_terms, m_a))
    inter = np.zeros((n_terms, n_terms, m_a))
    eta_hist = np.zeros((n_terms, n_terms))
    riesz_phi = []
    history = np.full(n_terms, np.nan)

    rhs_lift = op.apply_pieces(lift)[free]
    riesz_lift = v_factor.solve(-rhs_lift)
    c_lift = riesz_lift @ kappa_train.T          # cached per-sample Riesz fields
    c_phi = []

    rule = EtaRule(b=b, inter=inter)

    def indicator_all(k):
        t = c_lift.copy()
        if k:
            eta = rule.eval_many(train, n_terms=k)
            for q in range(k):
                t += c_phi[q] * eta[:, q]
        vals = np.einsum("is,is->s", t, vmat @ t)
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise IndicatorError("error indicator is not finite", sample_index=bad)
        return vals

    n_built = 0
    for k in range(n_terms):
        if k == 0:
            pick = int(rng.integers(n_samp))
            history[0] = float(np.max(indicator_all(0)))
        else:
            ind = indicator_all(k)
            history[k] = float(np.max(ind))
            if indicator_tol is not None and history[k] < indicator_tol:
                break
            pick = int(np.argmax(ind))
        xi_k = train[pick]
        samples[k] = xi_k

        a_k = op.assemble(np.exp(xi_k))
        eta_prev = rule(xi_k, n_terms=k) if k else np.zeros(0)
        eta_hist[k, :k] = eta_prev
        combined = lift + (phi[:, :k] @ eta_prev if k else 0.0)
        rhs = -(a_k @ combined)[free]
        try:
            sol = spla.splu(a_k[np.ix_(free, free)].tocsc()).solve(rhs)
        except RuntimeError as exc:
            raise RuntimeError(f"singular local system at greedy step {k + 1}: {exc}") from exc
        new_phi = np.zeros(patch.n_nodes)
        new_phi[free] = sol

        vn = np.sqrt(sol @ (vmat @ sol))
        if vn < min_basis_vnorm:
            warnings.warn(
                f"greedy terminated at {k} terms: new basis V-norm {vn:.2e} "
                "indicates an exhausted solution manifold", stacklevel=2)
            break

        phi[:, k] = new_phi
        b[k] = op.bilinear_by_piece(lift, new_phi)
        for q in range(k + 1):
            row = op.bilinear_by_piece(phi[:, q], new_phi)
            inter[k, q] = row
            inter[q, k] = row
        eta_hist[k, k] = 1.0

        w = v_factor.solve(-op.apply_pieces(new_phi)[free])
        riesz_phi.append(w)
        c_phi.append(w @ kappa_train.T)
        n_built = k + 1

    n = n_built
    rule = EtaRule(b=b[:n].copy(), inter=inter[:n, :n].copy())
    return SeparatedRepresentation(
        patch=patch, lift=lift.copy(), phi=phi[:, :n].copy(),
        samples=samples[:n].copy(), eta_rule=rule,
        eta_at_samples=eta_hist[:n, :n].copy(), vmat=vmat.tocsr(),
        riesz_lift=riesz_lift, riesz_phi=riesz_phi,
        indicator_history=history[:n].copy())


def direct_local_solve(patch: FineMesh, op: AffineOperator, lift: np.ndarray,
                       xi: np.ndarray) -> np.ndarray:
    """Reference solve of the local Dirichlet problem at one parameter."""
    free = patch.interior_nodes
    a = op.assemble(np.exp(np.asarray(xi, dtype=float)))
    rhs = -(a @ lift)[free]
    sol = spla.splu(a[np.ix_(free, free)].tocsc()).solve(rhs)
    out = lift.copy()
    out[free] += sol
    return out
