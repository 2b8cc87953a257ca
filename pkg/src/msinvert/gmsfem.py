"""Coarse grid, neighborhoods, snapshot spaces, and spectral reduction.

A coarse neighborhood is the union of the coarse elements adjacent to one
coarse node.  On a uniform grid there are four neighborhood shapes: corner
(one element), horizontal-edge (two elements side by side), vertical-edge
(two stacked), and interior (a 2x2 block).  The snapshot space of a
neighborhood collects harmonic extensions of nodal delta boundary data on the
fine boundary of the patch; a generalized eigenproblem in that space selects
the dominant traces used as effective boundary conditions downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .mesh import FineMesh, _grid_mesh, assemble_mass

TEMPLATE_KEYS = ("corner", "edge_x", "edge_y", "interior")


class NestingError(ValueError):
    """Fine grid does not nest in the coarse grid."""


class LocalSolverError(RuntimeError):
    """A local harmonic-extension solve failed."""


class SpectralError(RuntimeError):
    """The local generalized eigenproblem failed."""


@dataclass
class Neighborhood:
    """One coarse node's patch with index maps into the parent mesh."""

    index: int
    ci: int
    cj: int
    template: str
    patch: FineMesh = field(repr=False)
    node_map: np.ndarray = field(repr=False)   # local node -> global node
    cell_map: np.ndarray = field(repr=False)   # local cell -> global cell
    chi: np.ndarray = field(repr=False)        # partition-of-unity values on local nodes

    @property
    def is_boundary_node(self) -> bool:
        return self.template != "interior"


@dataclass
class CoarseGrid:
    """Nested coarse grid with one neighborhood per coarse node."""

    mesh: FineMesh
    hx_cells: int                      # fine cells per coarse cell, x
    hy_cells: int
    n_coarse_x: int
    n_coarse_y: int
    neighborhoods: list = field(repr=False)

    @property
    def n_coarse_nodes(self) -> int:
        return (self.n_coarse_x + 1) * (self.n_coarse_y + 1)

    def coarse_node_coords(self, ci: int, cj: int) -> tuple[float, float]:
        return (ci * self.hx_cells * self.mesh.hx, cj * self.hy_cells * self.mesh.hy)

    def interior_coarse_nodes(self) -> np.ndarray:
        """Indices into ``neighborhoods`` of coarse nodes off the domain boundary."""
        return np.array([nb.index for nb in self.neighborhoods
                         if not nb.is_boundary_node], dtype=int)


def _template_for(ci, cj, hx, hy):
    on_x = ci == 0 or ci == hx
    on_y = cj == 0 or cj == hy
    if on_x and on_y:
        return "corner"
    if on_y:
        return "edge_x"
    if on_x:
        return "edge_y"
    return "interior"


def build_coarse_grid(mesh: FineMesh, hx_coarse: int, hy_coarse: int) -> CoarseGrid:
    """Partition the mesh into ``hx_coarse x hy_coarse`` coarse elements."""
    if mesh.nx % hx_coarse or mesh.ny % hy_coarse:
        raise NestingError(
            f"fine grid {mesh.nx}x{mesh.ny} does not nest in coarse {hx_coarse}x{hy_coarse}")
    fx = mesh.nx // hx_coarse
    fy = mesh.ny // hy_coarse
    if fx < 2 or fy < 2:
        raise NestingError("coarse elements must contain at least 2 fine cells per axis")

    patches = {}
    neighborhoods = []
    idx = 0
    for cj in range(hy_coarse + 1):
        for ci in range(hx_coarse + 1):
            template = _template_for(ci, cj, hx_coarse, hy_coarse)
            cx0 = max(ci - 1, 0) * fx
            cx1 = min(ci + 1, hx_coarse) * fx
            cy0 = max(cj - 1, 0) * fy
            cy1 = min(cj + 1, hy_coarse) * fy
            ncx, ncy = cx1 - cx0, cy1 - cy0
            if (ncx, ncy) not in patches:
                patches[(ncx, ncy)] = _grid_mesh(ncx, ncy, mesh.hx, mesh.hy)
            patch = patches[(ncx, ncy)]

            li = np.arange(ncx + 1)
            lj = np.arange(ncy + 1)
            node_map = ((cy0 + lj)[:, None] * (mesh.nx + 1) + (cx0 + li)[None, :]).ravel()
            ki = np.arange(ncx)
            kj = np.arange(ncy)
            cell_map = ((cy0 + kj)[:, None] * mesh.nx + (cx0 + ki)[None, :]).ravel()

            # hat evaluated in patch-local coordinates so that congruent
            # neighborhoods carry bitwise-identical partition factors
            xn = (ci * fx - cx0) * mesh.hx
            yn = (cj * fy - cy0) * mesh.hy
            coords = patch.nodes
            chi = (np.maximum(0.0, 1.0 - np.abs(coords[:, 0] - xn) / (fx * mesh.hx))
                   * np.maximum(0.0, 1.0 - np.abs(coords[:, 1] - yn) / (fy * mesh.hy)))

            neighborhoods.append(Neighborhood(index=idx, ci=ci, cj=cj, template=template,
                                              patch=patch, node_map=node_map,
                                              cell_map=cell_map, chi=chi))
            idx += 1
    return CoarseGrid(mesh=mesh, hx_cells=fx, hy_cells=fy,
                      n_coarse_x=hx_coarse, n_coarse_y=hy_coarse,
                      neighborhoods=neighborhoods)


def template_neighborhood(grid: CoarseGrid, template: str) -> Neighborhood:
    """A canonical neighborhood instance of the requested template."""
    for nb in grid.neighborhoods:
        if nb.template == template:
            return nb
    raise ValueError(f"no neighborhood of template {template!r}")


def build_snapshots(patch: FineMesh, kappa: np.ndarray) -> np.ndarray:
    """Harmonic extensions of nodal deltas on the patch boundary.

    Column l solves ``-div(kappa grad phi) = 0`` with ``phi = delta_l`` on the
    patch boundary; rows are local nodes, columns follow the sorted boundary
    node order.  All columns share one factorization of the interior block.
    """
    a = patch.affine_operator.assemble(np.asarray(kappa, dtype=float))
    bnd = patch.boundary_nodes
    inn = patch.interior_nodes
    a_ii = a[np.ix_(inn, inn)].tocsc()
    a_ib = a[np.ix_(inn, bnd)].toarray()
    try:
        interior = -spla.splu(a_ii).solve(a_ib)
    except RuntimeError as exc:
        raise LocalSolverError(f"snapshot solve failed: {exc}") from exc
    snap = np.zeros((patch.n_nodes, bnd.size))
    snap[bnd, np.arange(bnd.size)] = 1.0
    snap[inn] = interior
    return snap


@dataclass
class EffectiveBoundarySet:
    """Dominant eigenpairs of the local pencil, stored as boundary traces."""

    eigenvalues: np.ndarray            # (M,) ascending
    traces: np.ndarray                 # (M, n_boundary) values on patch boundary nodes
    fields: np.ndarray = field(repr=False)   # (M, n_nodes) eigenfunctions on the patch

    @property
    def count(self) -> int:
        return self.eigenvalues.size


def reduce_snapshots(patch: FineMesh, snap: np.ndarray, kappa: np.ndarray,
                     n_keep: int) -> EffectiveBoundarySet:
    """Solve the snapshot-space pencil and keep the ``n_keep`` lowest modes.

    The pencil is ``(R^T A R) psi = lambda (R^T S R) psi`` with A and S the
    kappa-weighted stiffness and mass on the patch.  Eigenvectors come back
    S-orthonormal; signs are fixed so the first non-negligible coefficient is
    positive.  Because snapshot columns carry delta traces, the coefficient
    vector of a mode is exactly its boundary trace.
    """
    if n_keep > snap.shape[1]:
        raise ValueError(f"cannot keep {n_keep} modes from {snap.shape[1]} snapshots")
    kappa = np.asarray(kappa, dtype=float)
    a = patch.affine_operator.assemble(kappa)
    s = assemble_mass(patch, kappa)
    a_t = snap.T @ (a @ snap)
    s_t = snap.T @ (s @ snap)
    a_t = 0.5 * (a_t + a_t.T)
    s_t = 0.5 * (s_t + s_t.T)
    try:
        vals, vecs = sla.eigh(a_t, s_t)
    except sla.LinAlgError as exc:
        raise SpectralError(f"generalized eigensolve failed: {exc}") from exc
    vals = vals[:n_keep]
    vecs = vecs[:, :n_keep]
    scale = np.max(np.abs(vecs), axis=0)
    for j in range(n_keep):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-12 * max(scale[j], 1e-300))
        if nz.size and vecs[nz[0], j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return EffectiveBoundarySet(eigenvalues=vals, traces=vecs.T.copy(),
                                fields=(snap @ vecs).T)


def partition_of_unity(grid: CoarseGrid) -> np.ndarray:
    """Bilinear coarse hats on fine nodes, shape (n_coarse_nodes, n_fine_nodes)."""
    mesh = grid.mesh
    out = np.zeros((grid.n_coarse_nodes, mesh.n_nodes))
    for nb in grid.neighborhoods:
        out[nb.index, nb.node_map] = nb.chi
    return out
