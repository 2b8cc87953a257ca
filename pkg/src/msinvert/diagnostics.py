"""Forward-error metrics, prior-weighted forward discrepancy, and the
KL-divergence estimate between surrogate and reference posteriors.

The error metrics follow the reduced-model study: for a method s with
trajectory u_s and the fine reference u_h,

    eps_inf = max_n max_samples max_x |u_h^n - u_s^n|
    eps_2   = max_n sqrt( E_prior  integral (u_h^n - u_s^n)^2 dx )

with the prior expectation estimated by Monte Carlo over fixed test draws.
Timings measure basis construction only, excluding the global solve.

Per-sample evaluations are independent and could run concurrently; the
aggregations here keep a fixed order (numpy pairwise summation over
preallocated accumulators) so results are reproducible either way.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .coarse_model import (ForwardSpec, assemble_coarse_from_fields,
                           direct_basis_fields, fine_forward_map, forward_map,
                           gmsfem_basis_fields, solve_parabolic_coarse)
from .ensemble import StochasticBasisLibrary, build_library
from .inference import ChainConfig, ObservationSet, TGPosterior, run_chain
from .mesh import solve_parabolic_fine
from .random_field import GaussianPrior, build_prior


def derived_rng(seed: int, role: str) -> np.random.Generator:
    """Independent generator for a named sub-task of one experiment seed."""
    h = int.from_bytes(hashlib.sha256(f"{seed}:{role}".encode()).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), h]))

METHOD_LABELS = {"H": "gmsfem", "mbar": "direct", "ens": "separated"}


class UnreliableEstimateError(RuntimeError):
    """Importance-sampling effective sample size too small to trust."""


@dataclass
class ErrorReport:
    methods: tuple
    n_local_basis: int
    n_terms: int
    eps_inf: dict
    eps_2: dict
    timings: dict
    n_samples: int
    seed: int
    timing_evals: int

    def as_rows(self):
        """Rows (method, eps_inf, eps_2, tau) in the method order."""
        return [(m, self.eps_inf[m], self.eps_2[m], self.timings[m])
                for m in self.methods]


def _basis_builder(method: str, lib: StochasticBasisLibrary, n_modes: int):
    if method == "ens":
        return lambda xi: lib.eval_all(xi)
    if method == "mbar":
        return lambda xi: direct_basis_fields(lib, xi)
    if method == "H":
        return lambda xi: gmsfem_basis_fields(lib.grid, xi, n_modes)
    raise ValueError(f"unknown method {method!r}; expected one of H, mbar, ens")


def trajectory_errors(u_ref: np.ndarray, u_approx: np.ndarray, mass) -> tuple:
    """Max-abs error and per-step squared L2 errors of one trajectory pair."""
    err = u_ref - u_approx
    return float(np.max(np.abs(err))), np.einsum("nx,xn->n", err, mass @ err.T)


def forward_errors(lib: StochasticBasisLibrary, spec: ForwardSpec,
                   methods=("ens",), n_samples: int = 100, seed: int = 0,
                   prior: GaussianPrior | None = None,
                   timing_evals: int = 50) -> ErrorReport:
    """Monte Carlo forward-error and timing study over prior test draws.

    Every method sees the same draws.  The fine reference is solved once per
    draw; each method's coarse trajectory is reconstructed on the fine grid
    and compared at every time step.
    """
    if n_samples < 10:
        raise ValueError("need at least 10 test samples")
    mesh, grid = lib.mesh, lib.grid
    if prior is None:
        prior = build_prior(mesh, lib.params)
    rng = np.random.default_rng(seed)
    draws = prior.sample(rng, size=n_samples)
    if timing_evals > n_samples:
        extra = prior.sample(rng, size=timing_evals - n_samples)
        timing_draws = np.vstack([draws, extra])
    else:
        timing_draws = draws

    n_modes = lib.n_local_basis
    builders = {m: _basis_builder(m, lib, n_modes) for m in methods}
    mass = mesh.mass_matrix
    n_steps = round(spec.t_end / spec.dt)

    eps_inf = {m: 0.0 for m in methods}
    sumsq = {m: np.zeros(n_steps + 1) for m in methods}
    for s in range(n_samples):
        xi = draws[s]
        u_fine = solve_parabolic_fine(mesh, xi, spec.problem())
        for m in methods:
            fields = builders[m](xi)
            system = assemble_coarse_from_fields(mesh, grid, xi, fields, n_modes)
            u_coarse = solve_parabolic_coarse(system, spec)
            worst, sq = trajectory_errors(u_fine, u_coarse, mass)
            eps_inf[m] = max(eps_inf[m], worst)
            sumsq[m] += sq
    eps_2 = {m: float(np.sqrt(np.max(sumsq[m] / n_samples))) for m in methods}

    timings = {}
    n_time = timing_evals
    for m in methods:
        build = builders[m]
        start = time.perf_counter()
        for s in range(n_time):
            build(timing_draws[s])
        timings[m] = (time.perf_counter() - start) / n_time

    return ErrorReport(methods=tuple(methods), n_local_basis=n_modes,
                       n_terms=lib.n_terms, eps_inf=eps_inf, eps_2=eps_2,
                       timings=timings, n_samples=n_samples, seed=seed,
                       timing_evals=n_time)


@dataclass
class MonteCarloEstimate:
    value: float
    std_error: float
    n_samples: int


def l2_pi0_error(fine_map, surrogate_map, prior: GaussianPrior, n_mc: int,
                 rng: np.random.Generator) -> MonteCarloEstimate:
    """Prior-weighted squared observation discrepancy E ||G - G_N||^2."""
    if n_mc < 50:
        raise ValueError("need at least 50 Monte Carlo draws")
    draws = prior.sample(rng, size=n_mc)
    vals = np.empty(n_mc)
    for i in range(n_mc):
        diff = fine_map(draws[i]) - surrogate_map(draws[i])
        vals[i] = diff @ diff
    return MonteCarloEstimate(value=float(vals.mean()),
                              std_error=float(vals.std(ddof=1) / np.sqrt(n_mc)),
                              n_samples=n_mc)


def _log_weight_ess(log_w: np.ndarray) -> float:
    return float(np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)))


@dataclass
class KLEstimate:
    value: float
    std_error: float
    mean_term: float
    log_z_ratio: float
    ess_reference: float
    ess_surrogate: float
    n_eval: int
    n_prior: int
    se_mean_term: float = float("nan")
    se_log_z_ratio: float = float("nan")


def kl_from_values(potential_diff: np.ndarray, log_w_ref: np.ndarray,
                   log_w_sur: np.ndarray, min_ess: float = 10.0) -> KLEstimate:
    """KL estimate from precomputed potential differences and log-weights.

    ``potential_diff`` holds Phi - Phi_N at surrogate-posterior samples;
    ``log_w_*`` hold the negative potentials at shared prior draws.
    """
    diff = np.asarray(potential_diff, dtype=float)
    n_eval = diff.size
    mean_term = float(diff.mean())
    n_batch = min(10, n_eval)
    bm = np.array([b.mean() for b in np.array_split(diff, n_batch)])
    se_mean = float(bm.std(ddof=1) / np.sqrt(n_batch)) if n_batch > 1 else float("inf")

    n_prior = log_w_ref.size
    ess_ref = _log_weight_ess(log_w_ref)
    ess_sur = _log_weight_ess(log_w_sur)
    if min(ess_ref, ess_sur) < min_ess:
        raise UnreliableEstimateError(
            f"importance-sampling ESS too small (reference {ess_ref:.1f}, "
            f"surrogate {ess_sur:.1f} < {min_ess})")
    log_z_ratio = float(logsumexp(log_w_ref) - logsumexp(log_w_sur))

    u = np.exp(log_w_ref - log_w_ref.max())
    v = np.exp(log_w_sur - log_w_sur.max())
    ub, vb = u.mean(), v.mean()
    var_ratio = (u.var(ddof=1) / ub ** 2 + v.var(ddof=1) / vb ** 2
                 - 2.0 * np.cov(u, v, ddof=1)[0, 1] / (ub * vb)) / n_prior
    se_ratio = float(np.sqrt(max(var_ratio, 0.0)))

    return KLEstimate(value=mean_term + log_z_ratio,
                      std_error=float(np.hypot(se_mean, se_ratio)),
                      mean_term=mean_term, log_z_ratio=log_z_ratio,
                      ess_reference=ess_ref, ess_surrogate=ess_sur,
                      n_eval=n_eval, n_prior=n_prior,
                      se_mean_term=se_mean, se_log_z_ratio=se_ratio)


def kl_estimate(surrogate_samples: np.ndarray, reference_potential,
                surrogate_potential, prior_draws: np.ndarray,
                min_ess: float = 10.0) -> KLEstimate:
    """KL divergence of the reference posterior from the surrogate posterior.

    With potentials Phi (reference) and Phi_N (surrogate) relative to the
    shared Gaussian prior,

        D_KL(pi_N || pi) = E_{pi_N}[ Phi - Phi_N ] + log Z - log Z_N,

    the expectation runs over the surrogate-posterior samples and the
    normalizing constants are self-normalized importance-sampling estimates
    from the same prior draws (common random numbers keep the ratio stable).
    Negative Monte Carlo estimates are reported as-is with their error bars.
    """
    surrogate_samples = np.atleast_2d(surrogate_samples)
    prior_draws = np.atleast_2d(prior_draws)
    diff = np.array([reference_potential(x) - surrogate_potential(x)
                     for x in surrogate_samples])
    log_w_ref = -np.array([reference_potential(x) for x in prior_draws])
    log_w_sur = -np.array([surrogate_potential(x) for x in prior_draws])
    return kl_from_values(diff, log_w_ref, log_w_sur, min_ess=min_ess)


def kl_decay_study(mesh, grid, params, truth_xi, spec: ForwardSpec,
                   data_spec: ForwardSpec, sigma: float, tv_weight: float,
                   tv_eps: float, beta: float, chain_steps: int,
                   m_values, n_terms: int, n_train: int, n_mc: int,
                   n_eval: int, seed: int = 0, progress=None) -> list:
    """Joint decay of the forward L2 error and the posterior KL divergence.

    For each basis count m a fresh surrogate library is trained and sampled;
    the reference posterior uses the fine model at the surrogate time step.
    Fine-model work at the shared prior draws (for the normalizing constants
    and the forward discrepancy) is done once and reused across m, which also
    gives common random numbers to the whole sweep.  Returns one dict per m.
    """
    prior = build_prior(mesh, params)
    rng_noise = derived_rng(seed, "noise")
    data = fine_forward_map(mesh, truth_xi, data_spec)
    data = data + sigma * rng_noise.standard_normal(data.size)
    obs = ObservationSet(sensors=spec.sensors, times=spec.obs_times,
                         values=data, sigma=sigma)

    def fine(xi):
        return fine_forward_map(mesh, xi, spec)

    post_ref = TGPosterior(obs, fine, prior, mesh, tv_weight, tv_eps)
    draws = prior.sample(derived_rng(seed, "prior-mc"), size=n_mc)
    g_fine = np.array([fine(x) for x in draws])
    tv_draws = np.array([post_ref.tv(x) for x in draws])
    misfit_ref = np.array([(data - g) @ (data - g) for g in g_fine]) / (2 * sigma ** 2)
    log_w_ref = -(misfit_ref + tv_draws)

    rows = []
    for m in m_values:
        lib = build_library(mesh, grid, params, m, n_terms, n_train, seed=seed)

        def surrogate(xi, lib=lib):
            return forward_map(lib, xi, spec)

        g_sur = np.array([surrogate(x) for x in draws])
        sq = np.einsum("ij,ij->i", g_fine - g_sur, g_fine - g_sur)
        e_l2 = MonteCarloEstimate(value=float(sq.mean()),
                                  std_error=float(sq.std(ddof=1) / np.sqrt(n_mc)),
                                  n_samples=n_mc)
        misfit_sur = np.einsum("ij,ij->i", data - g_sur, data - g_sur) / (2 * sigma ** 2)
        log_w_sur = -(misfit_sur + tv_draws)

        post_sur = TGPosterior(obs, surrogate, prior, mesh, tv_weight, tv_eps)
        thin = max(1, chain_steps // (2 * n_eval))
        # one shared chain seed across the sweep: common random numbers keep
        # the m-to-m comparison stable
        chain = run_chain(post_sur, ChainConfig(
            n_steps=chain_steps, beta=beta, thin=thin,
            seed=int(derived_rng(seed, "chain").integers(2 ** 31))))
        kept = chain.kept_after_burn_in()
        take = np.unique(np.linspace(0, kept.shape[0] - 1,
                                     min(n_eval, kept.shape[0])).astype(int))
        diff = np.array([post_ref.potential(kept[i]) - post_sur.potential(kept[i])
                         for i in take])
        kl = kl_from_values(diff, log_w_ref, log_w_sur)
        rows.append({"n_local_basis": int(m), "e_l2": e_l2.value,
                     "e_l2_se": e_l2.std_error, "d_kl": kl.value,
                     "d_kl_se": kl.std_error, "d_kl_mean_term": kl.mean_term,
                     "d_kl_se_mean": kl.se_mean_term,
                     "d_kl_se_ratio": kl.se_log_z_ratio,
                     "ess_reference": kl.ess_reference,
                     "ess_surrogate": kl.ess_surrogate,
                     "acceptance_rate": chain.acceptance_rate})
        if progress is not None:
            progress(rows[-1])
    return rows
