"""Global coarse model: generalized-FEM assembly on multiscale bases,
backward-Euler time stepping, fine-grid reconstruction, and observation maps.

Three interchangeable ways of producing the per-neighborhood basis fields are
supported: the separated-form library (fast surrogate), direct local solves
with the library's fixed boundary data, and full per-parameter GMsFEM with
snapshot + spectral reduction.  All of them feed the same Galerkin assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ensemble import StaleLibraryError, StochasticBasisLibrary
from .gmsfem import CoarseGrid, build_snapshots, reduce_snapshots
from .mesh import (FineMesh, ParabolicProblem, SolverError, gaussian_plume,
                   point_interpolation_matrix, solve_parabolic_fine)


@dataclass
class ForwardSpec:
    """Everything needed to run a forward model and observe it.

    ``dirichlet`` holds nodal boundary values over the whole fine grid (None
    selects no-flow); ``source`` holds nodal source values, constant in time.
    Observation order is time-major, sensor-minor.
    """

    source: np.ndarray = field(repr=False)
    dirichlet: np.ndarray | None = field(repr=False)
    storage: float
    dt: float
    t_end: float
    sensors: np.ndarray
    obs_times: np.ndarray

    def __post_init__(self):
        self.sensors = np.atleast_2d(np.asarray(self.sensors, dtype=float))
        self.obs_times = np.asarray(self.obs_times, dtype=float)
        self.obs_steps()   # validates the lattice

    def obs_steps(self, dt: float | None = None) -> np.ndarray:
        """Time-step indices of the observation times on the dt lattice."""
        dt = self.dt if dt is None else dt
        steps = np.round(self.obs_times / dt).astype(int)
        if np.any(np.abs(steps * dt - self.obs_times) > 1e-9) or np.any(steps < 1):
            raise ValueError(
                f"observation times {self.obs_times} are not positive multiples of dt={dt}")
        if np.any(self.obs_times > self.t_end + 1e-12):
            raise ValueError("observation times exceed t_end")
        return steps

    @property
    def n_obs(self) -> int:
        return self.obs_times.size * self.sensors.shape[0]

    def with_dt(self, dt: float) -> "ForwardSpec":
        return replace(self, dt=dt)

    def problem(self) -> ParabolicProblem:
        return ParabolicProblem(source=self.source, dirichlet=self.dirichlet,
                                storage=self.storage, dt=self.dt, t_end=self.t_end)


def uniform_sensor_grid(nx: int, ny: int, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    """Uniform nx-by-ny sensor layout in [lo, hi]^2, row-major in y."""
    xs = np.linspace(lo, hi, nx)
    ys = np.linspace(lo, hi, ny)
    xx, yy = np.meshgrid(xs, ys)
    return np.column_stack([xx.ravel(), yy.ravel()])


def linear_boundary_values(mesh: FineMesh, coeffs) -> np.ndarray:
    """Nodal interpolant of g(x) = c0 + c1*x1 + c2*x2 on the whole grid."""
    c0, c1, c2 = coeffs
    return c0 + c1 * mesh.nodes[:, 0] + c2 * mesh.nodes[:, 1]


def case_forward_spec(mesh: FineMesh, boundary_coeffs=(1.7, -1.4, 0.0),
                      source_center=(0.55, 0.4), source_std=0.1, source_weight=1.0,
                      storage=1.0, dt=0.002, t_end=0.15,
                      sensors=None, obs_times=None) -> ForwardSpec:
    """Convenience constructor covering the shipped experiment layouts."""
    if sensors is None:
        sensors = uniform_sensor_grid(7, 7)
    if obs_times is None:
        obs_times = np.arange(0.02, 0.111, 0.01)
    g = None if boundary_coeffs is None else linear_boundary_values(mesh, boundary_coeffs)
    f = gaussian_plume(mesh, source_center, source_std, source_weight)
    return ForwardSpec(source=f, dirichlet=g, storage=storage, dt=dt, t_end=t_end,
                       sensors=sensors, obs_times=obs_times)


def build_r_matrix(grid: CoarseGrid, fields: list, n_modes: int) -> sp.csr_matrix:
    """Stack per-neighborhood basis fields into the prolongation matrix.

    Column ``nb.index * n_modes + j`` holds basis j of neighborhood nb
    scattered to global fine nodes.
    """
    mesh = grid.mesh
    n_dofs = len(grid.neighborhoods) * n_modes
    rows, cols, data = [], [], []
    for nb in grid.neighborhoods:
        flds = fields[nb.index]
        for j in range(n_modes):
            rows.append(nb.node_map)
            cols.append(np.full(nb.node_map.size, nb.index * n_modes + j))
            data.append(flds[j])
    return sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_nodes, n_dofs)).tocsr()


@dataclass
class CoarseSystem:
    """Galerkin projection of the fine operators onto the multiscale space."""

    mesh: FineMesh = field(repr=False)
    grid: CoarseGrid = field(repr=False)
    r_matrix: sp.csr_matrix = field(repr=False)
    a_fine: sp.csr_matrix = field(repr=False)
    a_coarse: np.ndarray = field(repr=False)
    m_coarse: np.ndarray = field(repr=False)
    n_modes: int

    @property
    def n_dofs(self) -> int:
        return self.r_matrix.shape[1]

    def free_dofs(self, dirichlet: bool) -> np.ndarray:
        """Active dofs: all of them for no-flow, interior coarse nodes otherwise."""
        if not dirichlet:
            return np.arange(self.n_dofs)
        inner = self.grid.interior_coarse_nodes()
        return (inner[:, None] * self.n_modes + np.arange(self.n_modes)).ravel()


def assemble_coarse_from_fields(mesh: FineMesh, grid: CoarseGrid, xi: np.ndarray,
                                fields: list, n_modes: int) -> CoarseSystem:
    a = mesh.affine_operator.assemble(np.exp(np.asarray(xi, dtype=float)))
    r = build_r_matrix(grid, fields, n_modes)
    a_c = (r.T @ (a @ r)).toarray()
    m_c = (r.T @ (mesh.mass_matrix @ r)).toarray()
    return CoarseSystem(mesh=mesh, grid=grid, r_matrix=r, a_fine=a,
                        a_coarse=0.5 * (a_c + a_c.T), m_coarse=0.5 * (m_c + m_c.T),
                        n_modes=n_modes)


def assemble_coarse(lib: StochasticBasisLibrary, xi: np.ndarray,
                    mesh: FineMesh | None = None,
                    grid: CoarseGrid | None = None) -> CoarseSystem:
    """Coarse system from the separated-form library at one parameter."""
    mesh = lib.mesh if mesh is None else mesh
    grid = lib.grid if grid is None else grid
    if not lib.matches(mesh, grid):
        raise StaleLibraryError(
            f"library hash {lib.content_hash[:12]} was built for grids "
            f"{lib.meta['fine_grid']}/{lib.meta['coarse_grid']}")
    fields = lib.eval_all(xi)
    return assemble_coarse_from_fields(mesh, grid, xi, fields, lib.n_local_basis)


def direct_basis_fields(lib: StochasticBasisLibrary, xi: np.ndarray) -> list:
    """Local problems solved directly at xi with the library's fixed lifts."""
    out = [None] * len(lib.grid.neighborhoods)
    for nb in lib.grid.neighborhoods:
        tb = lib.templates[nb.template]
        patch = nb.patch
        free = patch.interior_nodes
        a = patch.affine_operator.assemble(np.exp(lib.local_xi(nb, xi)))
        rhs = -(a @ tb.lifts.T)[free]
        sol = spla.splu(a[np.ix_(free, free)].tocsc()).solve(rhs)
        flds = tb.lifts.copy()
        flds[:, free] += sol.T
        out[nb.index] = flds * nb.chi[None, :]
    return out


def gmsfem_basis_fields(grid: CoarseGrid, xi: np.ndarray, n_modes: int) -> list:
    """Per-parameter GMsFEM: snapshots and spectral modes at this xi."""
    out = [None] * len(grid.neighborhoods)
    xi = np.asarray(xi, dtype=float)
    for nb in grid.neighborhoods:
        kappa = np.exp(xi[nb.cell_map])
        snap = build_snapshots(nb.patch, kappa)
        bset = reduce_snapshots(nb.patch, snap, kappa, n_modes)
        out[nb.index] = bset.fields * nb.chi[None, :]
    return out


def solve_parabolic_coarse(system: CoarseSystem, spec: ForwardSpec,
                           record_steps=None, obs_collector=None) -> np.ndarray:
    """Backward-Euler stepping in the coarse space with fine reconstruction.

    With Dirichlet data the boundary values enter through the fine-grid nodal
    lift: the coarse correction uses interior-coarse-node dofs only and the
    initial coefficient is the mass projection of ``-lift`` so the
    reconstructed initial state approximates zero.  Returns the reconstructed
    trajectory at ``record_steps`` (all steps by default);
    ``obs_collector(step, alpha)`` is called at every step when given.
    """
    dirichlet = spec.dirichlet is not None
    free = system.free_dofs(dirichlet)
    a_ff = system.a_coarse[np.ix_(free, free)]
    m_ff = system.m_coarse[np.ix_(free, free)]
    c, dt = spec.storage, spec.dt
    n_steps = round(spec.t_end / dt)
    r_free = system.r_matrix[:, free]

    if dirichlet:
        lift = np.asarray(spec.dirichlet, dtype=float)
        load = r_free.T @ (system.mesh.mass_matrix @ spec.source - system.a_fine @ lift)
        try:
            alpha = sla.solve(m_ff, -(r_free.T @ (system.mesh.mass_matrix @ lift)),
                              assume_a="pos")
        except sla.LinAlgError as exc:
            raise SolverError(f"coarse mass projection failed: {exc}", step=0) from exc
    else:
        lift = None
        load = r_free.T @ (system.mesh.mass_matrix @ spec.source)
        alpha = np.zeros(free.size)

    try:
        step_factor = sla.cho_factor(c * m_ff + dt * a_ff)
    except sla.LinAlgError as exc:
        raise SolverError(f"coarse stepping matrix not SPD: {exc}", step=0) from exc

    record = set(range(n_steps + 1)) if record_steps is None else set(record_steps)
    out = {}

    def reconstruct(a_vec):
        u = r_free @ a_vec
        return u + lift if dirichlet else u

    if 0 in record:
        out[0] = reconstruct(alpha)
    if obs_collector is not None:
        obs_collector(0, alpha)
    for n in range(1, n_steps + 1):
        rhs = c * (m_ff @ alpha) + dt * load
        alpha = sla.cho_solve(step_factor, rhs)
        if not np.all(np.isfinite(alpha)):
            raise SolverError("non-finite coarse solution", step=n)
        if n in record:
            out[n] = reconstruct(alpha)
        if obs_collector is not None:
            obs_collector(n, alpha)
    return np.array([out[s] for s in sorted(out)])


def _observe_coarse(system: CoarseSystem, spec: ForwardSpec) -> np.ndarray:
    """Observation vector without materializing the trajectory."""
    obs = point_interpolation_matrix(system.mesh, spec.sensors)
    dirichlet = spec.dirichlet is not None
    free = system.free_dofs(dirichlet)
    obs_r = (obs @ system.r_matrix[:, free]).toarray()
    base = obs @ spec.dirichlet if dirichlet else np.zeros(spec.sensors.shape[0])
    steps = set(spec.obs_steps().tolist())
    collected = {}

    def collect(n, alpha):
        if n in steps:
            collected[n] = obs_r @ alpha + base

    solve_parabolic_coarse(system, spec, record_steps=(), obs_collector=collect)
    return np.concatenate([collected[s] for s in spec.obs_steps()])


def forward_map(lib: StochasticBasisLibrary, xi: np.ndarray, spec: ForwardSpec,
                mesh: FineMesh | None = None, grid: CoarseGrid | None = None) -> np.ndarray:
    """Surrogate parameter-to-observation map (time-major, sensor-minor)."""
    system = assemble_coarse(lib, xi, mesh, grid)
    return _observe_coarse(system, spec)


def forward_map_from_fields(mesh: FineMesh, grid: CoarseGrid, xi: np.ndarray,
                            fields: list, n_modes: int, spec: ForwardSpec) -> np.ndarray:
    system = assemble_coarse_from_fields(mesh, grid, xi, fields, n_modes)
    return _observe_coarse(system, spec)


def fine_forward_map(mesh: FineMesh, xi: np.ndarray, spec: ForwardSpec) -> np.ndarray:
    """Reference parameter-to-observation map on the fine grid."""
    steps = spec.obs_steps()
    traj = solve_parabolic_fine(mesh, xi, spec.problem(), record_steps=steps.tolist())
    obs = point_interpolation_matrix(mesh, spec.sensors)
    uniq = np.array(sorted(set(steps.tolist())))
    by_step = {s: traj[i] for i, s in enumerate(uniq)}
    return np.concatenate([obs @ by_step[s] for s in steps])


@dataclass
class ResponseSlice:
    """Descriptor of a 1-D response view: a spatial line at a fixed time, or a
    time series at a fixed point."""

    kind: str                   # "line_x" (vary x), "line_y" (vary y), "time"
    x: float | None = None
    y: float | None = None
    t: float | None = None
    n_points: int = 81

    def points_and_steps(self, spec: ForwardSpec):
        if self.kind == "line_y":
            coords = np.linspace(0.0, 1.0, self.n_points)
            pts = np.column_stack([np.full_like(coords, self.x), coords])
            steps = [int(round(self.t / spec.dt))]
        elif self.kind == "line_x":
            coords = np.linspace(0.0, 1.0, self.n_points)
            pts = np.column_stack([coords, np.full_like(coords, self.y)])
            steps = [int(round(self.t / spec.dt))]
        elif self.kind == "time":
            n_steps = round(spec.t_end / spec.dt)
            steps = list(range(n_steps + 1))
            coords = spec.dt * np.arange(n_steps + 1)
            pts = np.array([[self.x, self.y]])
        else:
            raise ValueError(f"unknown slice kind {self.kind!r}")
        return coords, pts, steps


def response_slice(lib: StochasticBasisLibrary, xi: np.ndarray, spec: ForwardSpec,
                   slc: ResponseSlice) -> tuple[np.ndarray, np.ndarray]:
    """Surrogate response along a slice; returns (coordinates, values)."""
    coords, pts, steps = slc.points_and_steps(spec)
    system = assemble_coarse(lib, xi)
    traj = solve_parabolic_coarse(system, spec, record_steps=steps)
    obs = point_interpolation_matrix(lib.mesh, pts)
    vals = (obs @ traj.T)
    return coords, (vals.ravel() if slc.kind != "time" else vals.ravel())


def fine_response_slice(mesh: FineMesh, xi: np.ndarray, spec: ForwardSpec,
                        slc: ResponseSlice) -> tuple[np.ndarray, np.ndarray]:
    """Fine-model response along a slice; returns (coordinates, values)."""
    coords, pts, steps = slc.points_and_steps(spec)
    traj = solve_parabolic_fine(mesh, xi, spec.problem(), record_steps=steps)
    obs = point_interpolation_matrix(mesh, pts)
    return coords, (obs @ traj.T).ravel()
