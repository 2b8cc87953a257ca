"""Bilinear finite elements on uniform rectangular grids.

Provides the fine mesh of the unit square, the cellwise affine
decomposition of the stiffness matrix, mass matrices, a backward-Euler
parabolic solver used as the reference forward model, and bilinear point
interpolation for the observation map.

Node ordering is lexicographic with x fastest: node (i, j) has index
``j * (nx + 1) + i`` and coordinates ``(i * hx, j * hy)``.  Cells follow the
same convention: cell (i, j) has index ``j * nx + i`` and its four nodes are
listed counter-clockwise starting from the lower-left corner (SW, SE, NE, NW).

Assembly and solves are pure functions of their inputs and safe to call
concurrently on distinct problems; factorizations are created per call and
never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class InvalidDimensionError(ValueError):
    """Grid dimensions too small or inconsistent."""


class InvalidCoefficientError(ValueError):
    """Nonpositive or wrongly sized coefficient data."""


class OutOfDomainError(ValueError):
    """Interpolation point outside the meshed domain."""


class SolverError(RuntimeError):
    """Linear solve failed; carries the time-step index when applicable."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


def element_stiffness(hx: float, hy: float) -> np.ndarray:
    """Unit-coefficient stiffness matrix of one bilinear quad (SW, SE, NE, NW)."""
    kx = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]], dtype=float)
    ky = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]], dtype=float)
    return (hy / (6.0 * hx)) * kx + (hx / (6.0 * hy)) * ky


def element_mass(hx: float, hy: float) -> np.ndarray:
    """Consistent mass matrix of one bilinear quad (SW, SE, NE, NW)."""
    m = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]], dtype=float)
    return (hx * hy / 36.0) * m


@dataclass
class FineMesh:
    """Uniform grid of bilinear quads on ``[0, nx*hx] x [0, ny*hy]``.

    ``build_fine_mesh`` produces the unit-square instance; local patches used
    by the multiscale machinery carry the parent's cell sizes instead.
    """

    nx: int
    ny: int
    hx: float
    hy: float
    nodes: np.ndarray = field(repr=False)        # (n_nodes, 2)
    cells: np.ndarray = field(repr=False)        # (n_cells, 4) node ids, CCW from SW
    boundary_nodes: np.ndarray = field(repr=False)
    interior_nodes: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def node_index(self, i, j):
        """Index of grid node (i, j); accepts arrays."""
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def cell_index(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    def cell_centers(self) -> np.ndarray:
        """Centers of all cells, cell-lexicographic order, shape (n_cells, 2)."""
        i = np.arange(self.nx)
        j = np.arange(self.ny)
        cx = (i + 0.5) * self.hx
        cy = (j + 0.5) * self.hy
        xx, yy = np.meshgrid(cx, cy)
        return np.column_stack([xx.ravel(), yy.ravel()])

    @cached_property
    def affine_operator(self) -> "AffineOperator":
        return assemble_affine_stiffness(self)

    @cached_property
    def mass_matrix(self) -> sp.csr_matrix:
        return assemble_mass(self)


def _grid_mesh(nx: int, ny: int, hx: float, hy: float) -> FineMesh:
    if nx < 1 or ny < 1:
        raise InvalidDimensionError(f"grid needs at least one cell per axis, got {nx}x{ny}")
    i = np.arange(nx + 1)
    j = np.arange(ny + 1)
    xx, yy = np.meshgrid(i * hx, j * hy)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
    ci = ci.ravel()
    cj = cj.ravel()
    sw = cj * (nx + 1) + ci
    cells = np.column_stack([sw, sw + 1, sw + nx + 2, sw + nx + 1])

    ii, jj = np.meshgrid(i, j)
    on_bnd = (ii.ravel() == 0) | (ii.ravel() == nx) | (jj.ravel() == 0) | (jj.ravel() == ny)
    boundary = np.flatnonzero(on_bnd)
    interior = np.flatnonzero(~on_bnd)
    return FineMesh(nx=nx, ny=ny, hx=hx, hy=hy, nodes=nodes, cells=cells,
                    boundary_nodes=boundary, interior_nodes=interior)


def build_fine_mesh(nx: int, ny: int) -> FineMesh:
    """Uniform nx-by-ny bilinear mesh of the unit square."""
    if nx < 2 or ny < 2:
        raise InvalidDimensionError(f"fine mesh needs nx, ny >= 2, got {nx}x{ny}")
    return _grid_mesh(nx, ny, 1.0 / nx, 1.0 / ny)


class AffineOperator:
    """Cellwise affine decomposition of the stiffness matrix.

    Piece p is the unit-coefficient stiffness contribution of fine cell p, so
    the parametrized operator is ``A(w) = sum_p w_p * piece(p)`` with one
    weight per cell.  All pieces share one 4x4 element stencil because the
    grid is uniform.
    """

    def __init__(self, mesh: FineMesh):
        self.mesh = mesh
        self.k_el = element_stiffness(mesh.hx, mesh.hy)
        cells = mesh.cells
        n = mesh.n_nodes
        self.n_pieces = mesh.n_cells
        self.n_nodes = n
        # COO scatter pattern: entry (a, b) of the stencil for every cell.
        rows = np.repeat(cells, 4, axis=1).ravel()
        cols = np.tile(cells, (1, 4)).ravel()
        vals = np.tile(self.k_el.ravel(order="F"), mesh.n_cells)
        self._rows = rows
        self._cols = cols
        self._vals = vals

    def assemble(self, weights: np.ndarray) -> sp.csr_matrix:
        """Weighted sum ``sum_p weights[p] * a_p`` as a CSR matrix."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (self.n_pieces,):
            raise InvalidCoefficientError(
                f"expected {self.n_pieces} cell weights, got shape {weights.shape}")
        data = self._vals * np.repeat(weights, 16)
        a = sp.coo_matrix((data, (self._rows, self._cols)),
                          shape=(self.n_nodes, self.n_nodes)).tocsr()
        a.sum_duplicates()
        return a

    def piece(self, p: int) -> sp.csr_matrix:
        """Single piece a_p as a sparse matrix (16 scattered stencil entries)."""
        nodes = self.mesh.cells[p]
        rows = np.repeat(nodes, 4)
        cols = np.tile(nodes, 4)
        return sp.coo_matrix((self.k_el.ravel(), (rows, cols)),
                             shape=(self.n_nodes, self.n_nodes)).tocsr()

    def bilinear_by_piece(self, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Vector of per-piece energies ``[a_p(w, v)]_p`` in one pass."""
        wc = w[self.mesh.cells]
        vc = v[self.mesh.cells]
        return np.einsum("ca,ab,cb->c", wc, self.k_el, vc)

    def apply_pieces(self, v: np.ndarray) -> np.ndarray:
        """Dense (n_nodes, n_pieces) matrix whose column p is ``a_p @ v``.

        Only the four nodes of cell p are nonzero in column p; used to build
        the Riesz right-hand sides of the greedy training in one shot.
        """
        out = np.zeros((self.n_nodes, self.n_pieces))
        contrib = v[self.mesh.cells] @ self.k_el.T          # (n_cells, 4)
        cols = np.repeat(np.arange(self.n_pieces), 4)
        np.add.at(out, (self.mesh.cells.ravel(), cols), contrib.ravel())
        return out


def assemble_affine_stiffness(mesh: FineMesh) -> AffineOperator:
    """Affine stiffness decomposition with one piece per fine cell."""
    return AffineOperator(mesh)


def assemble_mass(mesh: FineMesh, cellwise_weights=None) -> sp.csr_matrix:
    """Consistent mass matrix, optionally with positive cellwise weights."""
    if cellwise_weights is None:
        weights = np.ones(mesh.n_cells)
    else:
        weights = np.asarray(cellwise_weights, dtype=float)
        if weights.shape != (mesh.n_cells,):
            raise InvalidCoefficientError(
                f"expected {mesh.n_cells} cell weights, got shape {weights.shape}")
        if np.any(weights <= 0.0):
            raise InvalidCoefficientError("mass weights must be strictly positive")
    m_el = element_mass(mesh.hx, mesh.hy)
    rows = np.repeat(mesh.cells, 4, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, 4)).ravel()
    data = np.tile(m_el.ravel(order="F"), mesh.n_cells) * np.repeat(weights, 16)
    m = sp.coo_matrix((data, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    m.sum_duplicates()
    return m


def gaussian_plume(mesh: FineMesh, center=(0.55, 0.4), std=0.1, weight=1.0) -> np.ndarray:
    """Nodal values of a Gaussian plume source of total mass ``weight``."""
    d2 = np.sum((mesh.nodes - np.asarray(center)) ** 2, axis=1)
    return weight / (2.0 * np.pi * std ** 2) * np.exp(-d2 / (2.0 * std ** 2))


@dataclass
class ParabolicProblem:
    """Time-dependent diffusion data: c u_t - div(kappa grad u) = f.

    ``source`` holds nodal values of f, constant in time (shape (n_nodes,)) or
    per step (shape (n_steps + 1, n_nodes)).  ``dirichlet`` holds nodal values
    of the boundary data g on the whole grid (only boundary entries are
    constrained); ``None`` selects no-flow (natural) boundary conditions.
    The initial state is zero.
    """

    source: np.ndarray
    dirichlet: np.ndarray | None
    storage: float
    dt: float
    t_end: float

    def __post_init__(self):
        if self.dt <= 0.0:
            raise InvalidCoefficientError("time step must be positive")
        n = round(self.t_end / self.dt)
        if n < 1 or abs(n * self.dt - self.t_end) > 1e-9 * self.t_end:
            raise InvalidCoefficientError(
                f"t_end={self.t_end} is not a positive multiple of dt={self.dt}")
        if not np.all(np.isfinite(np.asarray(self.source))):
            raise InvalidCoefficientError("source values must be finite")

    @property
    def n_steps(self) -> int:
        return round(self.t_end / self.dt)

    def source_at(self, n: int) -> np.ndarray:
        f = np.asarray(self.source)
        return f if f.ndim == 1 else f[n]


def solve_parabolic_fine(mesh: FineMesh, xi: np.ndarray, prob: ParabolicProblem,
                         record_steps=None, callback=None) -> np.ndarray:
    """Backward-Euler reference solve with coefficient ``exp(xi)`` per cell.

    Each step solves ``(c M + dt A(xi)) u^{n+1} = c M u^n + dt M f^{n+1}``
    with Dirichlet rows eliminated (boundary values moved to the right-hand
    side).  The system matrix is factorized once and reused across steps.

    Returns the trajectory ``u^0 .. u^{n_steps}`` as shape
    ``(n_steps + 1, n_nodes)``, or only the requested ``record_steps``.
    ``callback(n, u)`` runs after every accepted step when given.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (mesh.n_cells,):
        raise InvalidCoefficientError(
            f"xi must have one entry per cell ({mesh.n_cells}), got {xi.shape}")
    op = mesh.affine_operator
    a = op.assemble(np.exp(xi))
    m = mesh.mass_matrix
    c = prob.storage
    dt = prob.dt
    n_steps = prob.n_steps

    system = (c * m + dt * a).tocsc()
    u = np.zeros(mesh.n_nodes)

    if prob.dirichlet is None:
        free = np.arange(mesh.n_nodes)
        g = None
    else:
        free = mesh.interior_nodes
        g = np.zeros(mesh.n_nodes)
        g[mesh.boundary_nodes] = np.asarray(prob.dirichlet)[mesh.boundary_nodes]

    sys_ff = system[np.ix_(free, free)].tocsc()
    try:
        factor = spla.splu(sys_ff)
    except RuntimeError as exc:  # pragma: no cover - singular constrained system
        raise SolverError(f"factorization of the stepping matrix failed: {exc}") from exc
    sys_fc = None if g is None else system[free][:, mesh.boundary_nodes].tocsr()

    record = set(range(n_steps + 1)) if record_steps is None else set(record_steps)
    out = {}
    if 0 in record:
        out[0] = u.copy()
    cm = (c * m).tocsr()
    for n in range(1, n_steps + 1):
        rhs_full = cm @ u + dt * (m @ prob.source_at(n))
        rhs = rhs_full[free]
        if g is not None:
            rhs = rhs - sys_fc @ g[mesh.boundary_nodes]
        sol = factor.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SolverError("non-finite solution from the linear solver", step=n)
        u = np.zeros(mesh.n_nodes)
        u[free] = sol
        if g is not None:
            u[mesh.boundary_nodes] = g[mesh.boundary_nodes]
        if n in record:
            out[n] = u.copy()
        if callback is not None:
            callback(n, u)
    steps = sorted(out)
    return np.array([out[s] for s in steps])


def point_interpolation_matrix(mesh: FineMesh, points) -> sp.csr_matrix:
    """Sparse (n_points, n_nodes) bilinear interpolation operator."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lx = mesh.nx * mesh.hx
    ly = mesh.ny * mesh.hy
    eps = 1e-12
    if np.any(pts[:, 0] < -eps) or np.any(pts[:, 0] > lx + eps) \
            or np.any(pts[:, 1] < -eps) or np.any(pts[:, 1] > ly + eps):
        bad = pts[(pts[:, 0] < -eps) | (pts[:, 0] > lx + eps)
                  | (pts[:, 1] < -eps) | (pts[:, 1] > ly + eps)]
        raise OutOfDomainError(f"points outside the domain: {bad[:3]}...")
    ci = np.clip((pts[:, 0] / mesh.hx).astype(int), 0, mesh.nx - 1)
    cj = np.clip((pts[:, 1] / mesh.hy).astype(int), 0, mesh.ny - 1)
    s = pts[:, 0] / mesh.hx - ci
    t = pts[:, 1] / mesh.hy - cj
    cells = mesh.cells[mesh.cell_index(ci, cj)]
    w = np.column_stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t])
    rows = np.repeat(np.arange(pts.shape[0]), 4)
    return sp.coo_matrix((w.ravel(), (rows, cells.ravel())),
                         shape=(pts.shape[0], mesh.n_nodes)).tocsr()


def interpolate_at_points(mesh: FineMesh, fld: np.ndarray, points) -> np.ndarray:
    """Bilinear interpolation of a nodal field at points inside the domain."""
    return point_interpolation_matrix(mesh, points) @ np.asarray(fld, dtype=float)
