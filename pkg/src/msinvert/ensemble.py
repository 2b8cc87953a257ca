"""Ensemble training of stochastic multiscale basis functions.

One greedy separated representation is trained per neighborhood template on
the *sum* of that template's effective boundary lifts.  Each physical basis
of the ensemble representation is then decomposed into per-lift parts by
re-solving the residual systems with the shared coefficients, so all local
basis functions of a neighborhood are evaluated from a single interpolation
rule.  Multiplying by the partition-of-unity hats yields conforming global
basis fields.  Because the effective boundary data is built at the prior
mean, exactly four trainings serve every neighborhood in the domain via
index translation.

The template trainings are independent (each owns its generator) and a
finished library is immutable, so evaluations can run concurrently; only the
diagnostic ``eta_call_count`` is unsynchronized.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .gmsfem import (CoarseGrid, Neighborhood, TEMPLATE_KEYS, build_coarse_grid,
                     build_snapshots, reduce_snapshots, template_neighborhood)
from .mesh import AffineOperator, FineMesh, build_fine_mesh
from .random_field import GaussianPrior, KernelParams, build_prior_from_centers
from .separation import EtaRule, SeparatedRepresentation, vs_greedy

LIBRARY_FORMAT_VERSION = 1


class TemplateError(ValueError):
    """Neighborhood structure incompatible with template reuse."""


class StaleLibraryError(RuntimeError):
    """Library content hash does not match the requested configuration."""


def sum_boundaries(lifts: np.ndarray) -> np.ndarray:
    """Sum of the per-mode boundary lifts (the ensemble boundary condition)."""
    lifts = np.atleast_2d(np.asarray(lifts, dtype=float))
    return lifts.sum(axis=0)


def decompose_physical(patch: FineMesh, op: AffineOperator,
                       rep: SeparatedRepresentation, lifts: np.ndarray) -> np.ndarray:
    """Split each ensemble physical basis into per-lift parts.

    For mode j and term k, the part solves the residual system at the
    ensemble-selected sample ``xi^k`` with the shared coefficients
    ``eta_q(xi^k)``:

        a(Phi_{j,k}, v; xi^k) =
            -a(lift_j, v; xi^k) - sum_{q<k} eta_q(xi^k) a(Phi_{j,q}, v; xi^k).

    By linearity the parts sum to the ensemble basis for every term.  Returns
    shape (n_modes, n_nodes, n_terms).
    """
    lifts = np.atleast_2d(np.asarray(lifts, dtype=float))
    n_modes = lifts.shape[0]
    n = rep.n_terms
    free = patch.interior_nodes
    parts = np.zeros((n_modes, patch.n_nodes, n))
    for k in range(n):
        a_k = op.assemble(np.exp(rep.samples[k]))
        eta = rep.eta_at_samples[k, :k]
        combined = lifts + np.einsum("jxq,q->jx", parts[:, :, :k], eta)
        rhs = -(a_k @ combined.T)[free]
        sol = spla.splu(a_k[np.ix_(free, free)].tocsc()).solve(rhs)
        parts[:, free, k] = sol.T
    return parts


@dataclass
class TemplateBasis:
    """Separated forms shared by every neighborhood of one template."""

    template: str
    shape: tuple                        # (cells_x, cells_y) of the patch
    eigenvalues: np.ndarray
    lifts: np.ndarray = field(repr=False)        # (M, n_nodes) zero-extended
    phi_parts: np.ndarray = field(repr=False)    # (M, n_nodes, N)
    eta_rule: EtaRule = field(repr=False)
    samples: np.ndarray = field(repr=False)
    training_tail: float = float("nan")          # final max training indicator

    @property
    def n_modes(self) -> int:
        return self.lifts.shape[0]

    @property
    def n_terms(self) -> int:
        return self.phi_parts.shape[2]

    def basis_fields(self, eta: np.ndarray) -> np.ndarray:
        """Local functions for one coefficient vector, shape (M, n_nodes)."""
        return np.einsum("jxq,q->jx", self.phi_parts, eta) + self.lifts

    def basis_fields_many(self, eta: np.ndarray) -> np.ndarray:
        """Batched variant: (n_eval, N) -> (n_eval, M, n_nodes)."""
        return np.einsum("jxq,nq->njx", self.phi_parts, eta) + self.lifts[None]


def library_content_hash(fine_grid, coarse_grid, params: KernelParams,
                         n_local_basis, n_terms, n_train, seed) -> str:
    payload = json.dumps({
        "format": LIBRARY_FORMAT_VERSION,
        "fine_grid": list(fine_grid),
        "coarse_grid": list(coarse_grid),
        "kernel": [params.variance, params.length_x, params.length_y],
        "n_local_basis": int(n_local_basis),
        "n_terms": int(n_terms),
        "n_train": int(n_train),
        "seed": int(seed),
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class StochasticBasisLibrary:
    """Per-template separated forms plus neighborhood translation maps."""

    def __init__(self, mesh: FineMesh, grid: CoarseGrid, params: KernelParams,
                 templates: dict, meta: dict):
        self.mesh = mesh
        self.grid = grid
        self.params = params
        self.templates = templates
        self.meta = meta
        self.eta_call_count = 0

    @property
    def n_local_basis(self) -> int:
        return int(self.meta["n_local_basis"])

    @property
    def n_terms(self) -> int:
        return int(self.meta["n_terms"])

    @property
    def content_hash(self) -> str:
        return self.meta["hash"]

    def matches(self, mesh: FineMesh, grid: CoarseGrid) -> bool:
        return (mesh.nx, mesh.ny) == tuple(self.meta["fine_grid"]) and \
            (grid.n_coarse_x, grid.n_coarse_y) == tuple(self.meta["coarse_grid"])

    def local_xi(self, nb: Neighborhood, xi: np.ndarray) -> np.ndarray:
        return np.asarray(xi, dtype=float)[nb.cell_map]

    def eval_ms_basis(self, nb: Neighborhood, xi: np.ndarray) -> np.ndarray:
        """Multiscale basis fields of one neighborhood, shape (M, n_local_nodes).

        One interpolation-rule call serves all M fields; the hat multiplication
        makes the fields conforming (boundary values ``chi * lift``).
        """
        tb = self.templates[nb.template]
        eta = tb.eta_rule(self.local_xi(nb, xi))
        self.eta_call_count += 1
        return tb.basis_fields(eta) * nb.chi[None, :]

    def eval_all(self, xi: np.ndarray) -> list:
        """Basis fields for every neighborhood, batched per template.

        Returns a list aligned with ``grid.neighborhoods`` of arrays
        (M, n_local_nodes).
        """
        out = [None] * len(self.grid.neighborhoods)
        for key in TEMPLATE_KEYS:
            tb = self.templates[key]
            nbs = [nb for nb in self.grid.neighborhoods if nb.template == key]
            if not nbs:
                continue
            local = np.stack([self.local_xi(nb, xi) for nb in nbs])
            eta = tb.eta_rule.eval_many(local)
            self.eta_call_count += len(nbs)
            fields = tb.basis_fields_many(eta)
            for nb, flds in zip(nbs, fields):
                out[nb.index] = flds * nb.chi[None, :]
        return out

    def save(self, path) -> None:
        arrays = {"meta": np.array(json.dumps(self.meta))}
        for key, tb in self.templates.items():
            arrays[f"{key}__eigenvalues"] = tb.eigenvalues
            arrays[f"{key}__lifts"] = tb.lifts
            arrays[f"{key}__phi_parts"] = tb.phi_parts
            arrays[f"{key}__eta_b"] = tb.eta_rule.b
            arrays[f"{key}__eta_inter"] = tb.eta_rule.inter
            arrays[f"{key}__samples"] = tb.samples
            arrays[f"{key}__tail"] = np.array(tb.training_tail)
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "StochasticBasisLibrary":
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != LIBRARY_FORMAT_VERSION:
            raise StaleLibraryError(
                f"unsupported library format {meta.get('format')}")
        params = KernelParams(*meta["kernel"])
        expect = library_content_hash(meta["fine_grid"], meta["coarse_grid"], params,
                                      meta["n_local_basis"], meta["n_terms"],
                                      meta["n_train"], meta["seed"])
        if expect != meta["hash"]:
            raise StaleLibraryError("library hash does not match its metadata")
        mesh = build_fine_mesh(*meta["fine_grid"])
        grid = build_coarse_grid(mesh, *meta["coarse_grid"])
        templates = {}
        for key in TEMPLATE_KEYS:
            nb = template_neighborhood(grid, key)
            templates[key] = TemplateBasis(
                template=key,
                shape=(nb.patch.nx, nb.patch.ny),
                eigenvalues=data[f"{key}__eigenvalues"],
                lifts=data[f"{key}__lifts"],
                phi_parts=data[f"{key}__phi_parts"],
                eta_rule=EtaRule(b=data[f"{key}__eta_b"], inter=data[f"{key}__eta_inter"]),
                samples=data[f"{key}__samples"],
                training_tail=float(data[f"{key}__tail"]))
        return cls(mesh=mesh, grid=grid, params=params, templates=templates, meta=meta)


def train_template(grid: CoarseGrid, template: str, params: KernelParams,
                   n_local_basis: int, n_terms: int, n_train: int,
                   rng: np.random.Generator, keep_rep: bool = False):
    """Run the full pipeline for one template: spectral modes, ensemble greedy,
    decomposition.  Returns a TemplateBasis (and the ensemble representation
    when ``keep_rep``)."""
    nb = template_neighborhood(grid, template)
    patch = nb.patch
    kappa_bar = np.ones(patch.n_cells)
    snap = build_snapshots(patch, kappa_bar)
    bset = reduce_snapshots(patch, snap, kappa_bar, n_local_basis)

    lifts = np.zeros((n_local_basis, patch.n_nodes))
    lifts[:, patch.boundary_nodes] = bset.traces

    local_prior = build_prior_from_centers(patch.cell_centers(), params)
    train = local_prior.sample(rng, size=n_train)
    rep = vs_greedy(patch, patch.affine_operator, sum_boundaries(lifts),
                    train, n_terms, rng)
    parts = decompose_physical(patch, patch.affine_operator, rep, lifts)
    tb = TemplateBasis(template=template, shape=(patch.nx, patch.ny),
                       eigenvalues=bset.eigenvalues, lifts=lifts,
                       phi_parts=parts, eta_rule=rep.eta_rule,
                       samples=rep.samples,
                       training_tail=float(rep.indicator_history[-1]))
    return (tb, rep) if keep_rep else tb


def build_library(mesh: FineMesh, grid: CoarseGrid, prior,
                  n_local_basis: int, n_terms: int, n_train: int,
                  seed: int) -> StochasticBasisLibrary:
    """Train the four template bases and package them with translation maps.

    ``prior`` may be a GaussianPrior or bare KernelParams; training only needs
    the kernel, because each template draws from its local marginal.  The
    effective boundary conditions are built at the prior mean (kappa = 1),
    which makes them identical for all neighborhoods of a template; stationary
    kernel marginals make the training distributions identical as well, so the
    four trainings serve the whole domain.
    """
    if grid.mesh is not mesh and (grid.mesh.nx, grid.mesh.ny) != (mesh.nx, mesh.ny):
        raise TemplateError("coarse grid was built on a different mesh")
    params = prior.params if isinstance(prior, GaussianPrior) else prior
    seeds = np.random.SeedSequence(seed).spawn(len(TEMPLATE_KEYS))
    templates = {}
    for key, ss in zip(TEMPLATE_KEYS, seeds):
        templates[key] = train_template(grid, key, params, n_local_basis,
                                        n_terms, n_train, np.random.default_rng(ss))
    meta = {
        "format": LIBRARY_FORMAT_VERSION,
        "fine_grid": [mesh.nx, mesh.ny],
        "coarse_grid": [grid.n_coarse_x, grid.n_coarse_y],
        "kernel": [params.variance, params.length_x, params.length_y],
        "n_local_basis": int(n_local_basis),
        "n_terms": int(n_terms),
        "n_train": int(n_train),
        "seed": int(seed),
    }
    meta["hash"] = library_content_hash(meta["fine_grid"], meta["coarse_grid"], params,
                                        n_local_basis, n_terms, n_train, seed)
    return StochasticBasisLibrary(mesh=mesh, grid=grid, params=params,
                                  templates=templates, meta=meta)
