"""TV-Gaussian posterior evaluation and pCN sampling.

The posterior over the cellwise log-coefficient vector is

    pi(xi | d)  ~  exp( -||d - G(xi)||^2 / (2 sigma^2) - R(xi) ) * N(0, Sigma),

where R is a smoothed total-variation penalty on the (log) field.  pCN
proposals ``xi' = sqrt(1 - beta^2) xi + beta w`` with prior draws w leave the
Gaussian factor invariant, so the acceptance ratio involves only the
potential (misfit + TV), never the prior quadratic.

A single chain is sequential; parallel chains need independent generators and
may share the (read-only) posterior and forward-map handles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .mesh import FineMesh
from .random_field import GaussianPrior


class InsufficientSamplesError(ValueError):
    """Too few post-burn-in states for the requested statistic."""


class CheckpointError(RuntimeError):
    """Chain checkpoint could not be written or read."""


def tv_penalty(mesh: FineMesh, values: np.ndarray, weight: float, eps: float) -> float:
    """Smoothed total variation of a cellwise field on the mesh's cell grid.

    Forward differences between neighboring cells, smoothing parameter eps
    under the square root, scaled by the cell area:

        R = weight * sum_cells sqrt(gx^2 + gy^2 + eps^2) * hx * hy.
    """
    m = np.asarray(values, dtype=float).reshape(mesh.ny, mesh.nx)
    gx = np.zeros_like(m)
    gy = np.zeros_like(m)
    gx[:, :-1] = np.diff(m, axis=1) / mesh.hx
    gy[:-1, :] = np.diff(m, axis=0) / mesh.hy
    return float(weight * np.sum(np.sqrt(gx ** 2 + gy ** 2 + eps ** 2))
                 * mesh.hx * mesh.hy)


@dataclass
class ObservationSet:
    """Sensor locations, observation times, data vector, and noise level."""

    sensors: np.ndarray
    times: np.ndarray
    values: np.ndarray
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("observation noise sigma must be positive")
        self.values = np.asarray(self.values, dtype=float)

    @property
    def n_obs(self) -> int:
        return self.values.size


class TGPosterior:
    """Potential of the TV-Gaussian posterior for a given forward map.

    ``forward`` maps a parameter vector to the model observations (fine or
    surrogate).  The potential is misfit plus TV penalty; the Gaussian prior
    quadratic is intentionally excluded because pCN treats the prior as the
    reference measure.
    """

    def __init__(self, obs: ObservationSet, forward, prior: GaussianPrior,
                 mesh: FineMesh, tv_weight: float, tv_eps: float = 1e-3,
                 tv_on_log: bool = True):
        if tv_weight < 0.0:
            raise ValueError("TV weight must be nonnegative")
        if tv_eps <= 0.0:
            raise ValueError("TV smoothing eps must be positive")
        self.obs = obs
        self.forward = forward
        self.prior = prior
        self.mesh = mesh
        self.tv_weight = tv_weight
        self.tv_eps = tv_eps
        self.tv_on_log = tv_on_log

    def misfit(self, xi: np.ndarray) -> float:
        r = self.obs.values - self.forward(xi)
        return float(r @ r) / (2.0 * self.obs.sigma ** 2)

    def tv(self, xi: np.ndarray) -> float:
        if self.tv_weight == 0.0:
            return 0.0
        vals = xi if self.tv_on_log else np.exp(xi)
        return tv_penalty(self.mesh, vals, self.tv_weight, self.tv_eps)

    def potential(self, xi: np.ndarray) -> float:
        return self.misfit(xi) + self.tv(xi)

    def log_unnormalized(self, xi: np.ndarray) -> float:
        """Full unnormalized log-density (potential plus prior quadratic)."""
        return -(self.potential(xi) + 0.5 * float(self.prior.sq_mahalanobis(xi)))


def log_potential(post: TGPosterior, xi: np.ndarray) -> float:
    return post.potential(xi)


def pcn_step(post: TGPosterior, state: np.ndarray, potential: float,
             beta: float, rng: np.random.Generator):
    """One pCN transition; returns (state, potential, accepted).

    Draw order is fixed (proposal noise, then the acceptance uniform) so that
    checkpoint resumes replay the same stream.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("pCN step size beta must lie in (0, 1]")
    w = post.prior.sample(rng)
    proposal = np.sqrt(1.0 - beta ** 2) * state + beta * w
    prop_pot = post.potential(proposal)
    log_alpha = potential - prop_pot
    if np.log(rng.uniform()) < log_alpha:
        return proposal, prop_pot, True
    return state, potential, False


@dataclass
class ChainConfig:
    n_steps: int
    beta: float
    seed: int = 0
    burn_in: float = 0.5
    thin: int = 1
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    start: str = "prior"            # "prior", "zero", or an explicit vector

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("chain needs at least one step")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError("burn-in fraction must lie in [0, 1)")
        if self.thin < 1:
            raise ValueError("thinning must be >= 1")


@dataclass
class Chain:
    """Recorded pCN states with bookkeeping for statistics and resumption."""

    states: np.ndarray = field(repr=False)       # (n_kept, dim), every thin-th step
    kept_steps: np.ndarray = field(repr=False)
    potentials: np.ndarray = field(repr=False)   # (n_steps + 1,)
    accepts: np.ndarray = field(repr=False)      # (n_steps,)
    beta: float = 0.0
    seed: int = 0
    thin: int = 1
    burn_in: float = 0.5

    @property
    def n_steps(self) -> int:
        return self.accepts.size

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepts))

    def _kept_mask(self) -> np.ndarray:
        cut = self.burn_in * self.n_steps
        return self.kept_steps > cut if cut > 0 else np.ones_like(self.kept_steps,
                                                                  dtype=bool)

    def kept_after_burn_in(self) -> np.ndarray:
        return self.states[self._kept_mask()]

    def kept_potentials_after_burn_in(self) -> np.ndarray:
        return self.potentials[self.kept_steps[self._kept_mask()]]


def _write_checkpoint(path, config: ChainConfig, step, state, potential,
                      kept, kept_steps, potentials, accepts, rng):
    header = {
        "version": 1,
        "n_steps": config.n_steps,
        "beta": config.beta,
        "seed": config.seed,
        "burn_in": config.burn_in,
        "thin": config.thin,
        "step": int(step),
        "rng_state": rng.bit_generator.state,
    }
    try:
        tmp = Path(str(path) + ".tmp.npz")   # savez appends .npz otherwise
        np.savez_compressed(
            tmp, header=np.array(json.dumps(header)), state=state,
            potential=np.array(potential),
            kept=np.array(kept) if kept else np.zeros((0, state.size)),
            kept_steps=np.array(kept_steps, dtype=int),
            potentials=np.array(potentials),
            accepts=np.array(accepts, dtype=bool))
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Raw checkpoint contents: (header dict, arrays dict)."""
    try:
        data = np.load(path, allow_pickle=False)
        header = json.loads(str(data["header"]))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"failed to read checkpoint {path}: {exc}") from exc
    return header, {k: data[k] for k in data.files if k != "header"}


def run_chain(post: TGPosterior, config: ChainConfig,
              resume_from=None, stop_at_step: int | None = None) -> Chain:
    """Run (or resume) a pCN chain; deterministic given (config, posterior).

    States at steps divisible by ``thin`` are recorded; potentials and
    acceptance flags are recorded for every step.  When ``checkpoint_every``
    is positive a resumable snapshot is written at that cadence and at the
    end; resuming an interrupted run reproduces the uninterrupted chain
    bit for bit because the generator state travels with the checkpoint.
    ``stop_at_step`` halts a staged run early with a resumable checkpoint.
    """
    rng = np.random.default_rng(config.seed)
    dim = post.prior.dim

    if resume_from is not None:
        header, arrays = load_checkpoint(resume_from)
        for key in ("n_steps", "beta", "seed", "burn_in", "thin"):
            ours = getattr(config, key)
            if header[key] != ours:
                raise CheckpointError(
                    f"checkpoint field {key}={header[key]} differs from config {ours}")
        rng.bit_generator.state = header["rng_state"]
        step0 = header["step"]
        state = arrays["state"]
        potential = float(arrays["potential"])
        kept = [row for row in arrays["kept"]]
        kept_steps = arrays["kept_steps"].tolist()
        potentials = arrays["potentials"].tolist()
        accepts = arrays["accepts"].tolist()
    else:
        if isinstance(config.start, str):
            state = post.prior.sample(rng) if config.start == "prior" else np.zeros(dim)
        else:
            state = np.asarray(config.start, dtype=float).copy()
        potential = post.potential(state)
        step0 = 0
        kept, kept_steps = [state.copy()], [0]
        potentials = [potential]
        accepts = []

    last = config.n_steps if stop_at_step is None else min(stop_at_step,
                                                           config.n_steps)
    for step in range(step0 + 1, last + 1):
        state, potential, acc = pcn_step(post, state, potential, config.beta, rng)
        potentials.append(potential)
        accepts.append(acc)
        if step % config.thin == 0:
            kept.append(state.copy())
            kept_steps.append(step)
        if config.checkpoint_path and (step == last or (
                config.checkpoint_every and step % config.checkpoint_every == 0)):
            _write_checkpoint(config.checkpoint_path, config, step, state, potential,
                              kept, kept_steps, potentials, accepts, rng)

    return Chain(states=np.array(kept), kept_steps=np.array(kept_steps, dtype=int),
                 potentials=np.array(potentials), accepts=np.array(accepts, dtype=bool),
                 beta=config.beta, seed=config.seed, thin=config.thin,
                 burn_in=config.burn_in)


@dataclass
class PosteriorStats:
    mean: np.ndarray
    std: np.ndarray
    quantiles: dict
    map_state: np.ndarray
    map_log_density: float
    n_samples: int


def posterior_stats(chain: Chain, prior: GaussianPrior | None = None,
                    quantiles=(0.025, 0.25, 0.5, 0.75, 0.95, 0.975),
                    min_samples: int = 100) -> PosteriorStats:
    """Pointwise statistics over the kept post-burn-in states.

    The MAP is the best stored state under the full unnormalized posterior
    (potential plus prior quadratic); it needs the prior handle.
    """
    kept = chain.kept_after_burn_in()
    if kept.shape[0] < min_samples:
        raise InsufficientSamplesError(
            f"only {kept.shape[0]} post-burn-in samples, need {min_samples}")
    pots = chain.kept_potentials_after_burn_in()
    if prior is not None:
        log_dens = -(pots + 0.5 * prior.sq_mahalanobis(kept))
    else:
        log_dens = -pots
    best = int(np.argmax(log_dens))
    qs = {q: np.quantile(kept, q, axis=0) for q in quantiles}
    return PosteriorStats(mean=kept.mean(axis=0), std=kept.std(axis=0),
                          quantiles=qs, map_state=kept[best].copy(),
                          map_log_density=float(log_dens[best]),
                          n_samples=kept.shape[0])


def component_distributions(chain: Chain, components, n_bins: int = 40) -> dict:
    """Histogram, empirical cdf, and normal QQ data for selected components.

    Precomputed here so that plotting scripts only draw; QQ pairs are the
    ordered sample values against standard-normal quantiles scaled to the
    sample mean and standard deviation.
    """
    kept = chain.kept_after_burn_in()
    out = {}
    for comp in components:
        x = np.sort(kept[:, comp])
        n = x.size
        counts, edges = np.histogram(x, bins=n_bins)
        probs = (np.arange(n) + 0.5) / n
        theo = norm.ppf(probs) * x.std() + x.mean()
        out[int(comp)] = {
            "hist_edges": edges, "hist_counts": counts,
            "ecdf_x": x, "ecdf_y": (np.arange(n) + 1) / n,
            "qq_theoretical": theo, "qq_sample": x,
        }
    return out


@dataclass
class PredictionBands:
    coords: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    credible_lo: np.ndarray
    credible_hi: np.ndarray
    predictive_lo: np.ndarray
    predictive_hi: np.ndarray


def predict_intervals(chain: Chain, push_forward, sigma: float,
                      n_push: int = 200, level: float = 0.95) -> PredictionBands:
    """Credible and predictive bands of a scalar response slice.

    ``push_forward(xi) -> (coords, values)`` maps a state to the response
    view (see ``coarse_model.response_slice``).  Credible bands are
    pushforward quantiles over an even subsample of the kept states;
    predictive bands widen them by the observation-noise quantiles, so both
    coincide as sigma -> 0.
    """
    kept = chain.kept_after_burn_in()
    if kept.shape[0] < 1:
        raise InsufficientSamplesError("empty chain after burn-in")
    take = np.unique(np.linspace(0, kept.shape[0] - 1,
                                 min(n_push, kept.shape[0])).astype(int))
    coords = None
    rows = []
    for idx in take:
        coords, vals = push_forward(kept[idx])
        rows.append(vals)
    push = np.array(rows)
    lo, hi = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    cred_lo = np.quantile(push, lo, axis=0)
    cred_hi = np.quantile(push, hi, axis=0)
    return PredictionBands(
        coords=coords,
        mean=push.mean(axis=0),
        median=np.quantile(push, 0.5, axis=0),
        credible_lo=cred_lo,
        credible_hi=cred_hi,
        predictive_lo=cred_lo + sigma * norm.ppf(lo),
        predictive_hi=cred_hi + sigma * norm.ppf(hi))
