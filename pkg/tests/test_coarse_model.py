"""Coarse Galerkin assembly, time stepping, and observation maps."""

import numpy as np
import pytest

from msinvert.coarse_model import (ForwardSpec, ResponseSlice, assemble_coarse,
                                   case_forward_spec, fine_forward_map,
                                   fine_response_slice, forward_map,
                                   response_slice, solve_parabolic_coarse,
                                   uniform_sensor_grid)
from msinvert.ensemble import StaleLibraryError
from msinvert.mesh import build_fine_mesh, solve_parabolic_fine


@pytest.fixture(scope="module")
def spec20(small_problem):
    mesh, _, _ = small_problem
    return case_forward_spec(mesh, boundary_coeffs=(1.7, -1.4, 0.0),
                             dt=0.005, t_end=0.15,
                             obs_times=np.arange(0.02, 0.111, 0.01))


class TestAssembly:
    def test_coarse_matrices_symmetric(self, small_problem, small_xi):
        _, _, lib = small_problem
        system = assemble_coarse(lib, small_xi)
        assert np.max(np.abs(system.a_coarse - system.a_coarse.T)) < 1e-12
        assert np.max(np.abs(system.m_coarse - system.m_coarse.T)) < 1e-12

    def test_coarse_stiffness_psd(self, small_problem, small_xi):
        _, _, lib = small_problem
        system = assemble_coarse(lib, small_xi)
        vals = np.linalg.eigvalsh(system.a_coarse)
        assert vals.min() > -1e-9 * max(vals.max(), 1.0)

    def test_dirichlet_dof_count(self, small_problem, small_xi):
        # 4x4 coarse grid: 3x3 interior coarse nodes, M=3 modes each
        _, grid, lib = small_problem
        system = assemble_coarse(lib, small_xi)
        assert system.n_dofs == 25 * 3
        assert system.free_dofs(dirichlet=True).size == 9 * 3
        assert system.free_dofs(dirichlet=False).size == 75

    def test_stale_library_rejected(self, small_problem, small_xi):
        from msinvert.gmsfem import build_coarse_grid
        _, _, lib = small_problem
        other = build_fine_mesh(40, 40)
        with pytest.raises(StaleLibraryError):
            assemble_coarse(lib, small_xi, other, build_coarse_grid(other, 4, 4))

    def test_constant_in_span_and_neumann_heatup(self, small_problem, small_xi):
        # direct local solves extend constant boundary data exactly, so that
        # space contains the constant to machine precision; the separated
        # library carries its training error on top (the 20x20 mini problem
        # has a length scale near the cell size, so that error is percent
        # level -- paper-scale fidelity is covered by the acceptance suite)
        from msinvert.coarse_model import (assemble_coarse_from_fields,
                                           direct_basis_fields)
        mesh, grid, lib = small_problem
        direct = assemble_coarse_from_fields(
            mesh, grid, small_xi, direct_basis_fields(lib, small_xi), 3)
        r = direct.r_matrix.toarray()
        coef, *_ = np.linalg.lstsq(r, np.ones(mesh.n_nodes), rcond=None)
        assert np.max(np.abs(r @ coef - 1.0)) < 1e-10

        system = assemble_coarse(lib, small_xi)
        r_lib = system.r_matrix.toarray()
        coef, *_ = np.linalg.lstsq(r_lib, np.ones(mesh.n_nodes), rcond=None)
        assert np.max(np.abs(r_lib @ coef - 1.0)) < 5e-2

        spec = case_forward_spec(mesh, boundary_coeffs=None, dt=0.01, t_end=0.1,
                                 obs_times=[0.05, 0.1])
        u_fine = solve_parabolic_fine(mesh, small_xi, spec.problem())
        mass = mesh.mass_matrix
        for sys_ in (direct, system):
            u_coarse = solve_parabolic_coarse(sys_, spec)
            err = u_fine[-1] - u_coarse[-1]
            rel = np.sqrt(err @ (mass @ err)) / np.sqrt(
                u_fine[-1] @ (mass @ u_fine[-1]))
            assert rel < 5e-2


class TestCoarseSolver:
    def test_zero_data_zero_trajectory(self, small_problem, small_xi):
        mesh, _, lib = small_problem
        system = assemble_coarse(lib, small_xi)
        spec = ForwardSpec(source=np.zeros(mesh.n_nodes),
                           dirichlet=np.zeros(mesh.n_nodes), storage=1.0,
                           dt=0.01, t_end=0.05, sensors=[[0.5, 0.5]],
                           obs_times=[0.05])
        traj = solve_parabolic_coarse(system, spec)
        assert np.max(np.abs(traj)) < 1e-12

    def test_boundary_values_exact_on_reconstruction(self, small_problem,
                                                     small_xi, spec20):
        mesh, _, lib = small_problem
        system = assemble_coarse(lib, small_xi)
        traj = solve_parabolic_coarse(system, spec20, record_steps=[10])
        g = spec20.dirichlet
        assert np.allclose(traj[0][mesh.boundary_nodes], g[mesh.boundary_nodes])

    def test_galerkin_optimality_first_step(self, small_problem, small_xi, spec20):
        # the first coarse step minimizes the step-energy distance to the
        # fine first step over the coarse space
        mesh, _, lib = small_problem
        system = assemble_coarse(lib, small_xi)
        c, dt = spec20.storage, spec20.dt
        free = system.free_dofs(True)
        r_free = system.r_matrix[:, free]
        s_fine = (c * mesh.mass_matrix + dt * system.a_fine).tocsr()
        u1 = solve_parabolic_fine(mesh, small_xi, spec20.problem(),
                                  record_steps=[1])[0]

        s_ff = c * system.m_coarse[np.ix_(free, free)] \
            + dt * system.a_coarse[np.ix_(free, free)]
        lift = spec20.dirichlet
        load = r_free.T @ (mesh.mass_matrix @ spec20.source - system.a_fine @ lift)
        import scipy.linalg as sla
        alpha0 = sla.solve(system.m_coarse[np.ix_(free, free)],
                           -(r_free.T @ (mesh.mass_matrix @ lift)), assume_a="pos")
        rhs = c * (system.m_coarse[np.ix_(free, free)] @ alpha0) + dt * load
        alpha1 = sla.solve(s_ff, rhs, assume_a="pos")

        def energy_gap(a_vec):
            diff = (r_free @ a_vec + lift) - u1
            return diff @ (s_fine @ diff)

        base = energy_gap(alpha1)
        rng = np.random.default_rng(9)
        for scale in (1e-3, 1e-2, 1e-1):
            pert = alpha1 + scale * rng.normal(size=alpha1.size)
            assert energy_gap(pert) >= base - 1e-12 * abs(base)

    def test_time_step_refinement_first_order(self, small_problem, small_xi):
        mesh, _, lib = small_problem
        sensors = uniform_sensor_grid(3, 3)
        outs = []
        dts = [0.01, 0.005, 0.0025]
        for dt in dts:
            spec = case_forward_spec(mesh, boundary_coeffs=(1.7, -1.4, 0.0),
                                     dt=dt, t_end=0.12, sensors=sensors,
                                     obs_times=[0.04, 0.08, 0.12])
            outs.append(forward_map(lib, small_xi, spec))
        # consecutive-refinement differences scale like dt (backward Euler)
        d1 = np.linalg.norm(outs[0] - outs[1])
        d2 = np.linalg.norm(outs[1] - outs[2])
        slope = np.log2(d1 / d2)
        assert 0.8 <= slope <= 1.2


class TestForwardMap:
    def test_case1_observation_vector_length(self, small_problem, small_xi):
        mesh, _, lib = small_problem
        spec = case_forward_spec(mesh, dt=0.005, t_end=0.15)
        d = forward_map(lib, small_xi, spec)
        assert d.size == 490

    def test_surrogate_matches_fine_at_mean(self, small_problem, spec20):
        # the mini problem has a length scale near the cell size, so the
        # surrogate fidelity here is percent level; the 1% desk-scale bound
        # is asserted on the 40x40/4x4 configuration in the acceptance suite
        mesh, _, lib = small_problem
        xi = np.zeros(mesh.n_cells)
        d_sur = forward_map(lib, xi, spec20)
        d_fine = fine_forward_map(mesh, xi, spec20)
        rel = np.linalg.norm(d_sur - d_fine) / np.linalg.norm(d_fine)
        assert rel < 0.05

    def test_sensor_permutation_permutes_output(self, small_problem,
                                                small_xi, spec20):
        from dataclasses import replace
        _, _, lib = small_problem
        perm = np.random.default_rng(10).permutation(spec20.sensors.shape[0])
        spec_perm = replace(spec20, sensors=spec20.sensors[perm])
        base = forward_map(lib, small_xi, spec20).reshape(
            spec20.obs_times.size, -1)
        permed = forward_map(lib, small_xi, spec_perm).reshape(
            spec20.obs_times.size, -1)
        assert np.allclose(permed, base[:, perm], atol=1e-13)

    def test_time_major_order(self, small_problem, small_xi):
        # observations vary across time blocks for a fixed sensor
        mesh, _, lib = small_problem
        spec = case_forward_spec(mesh, dt=0.005, t_end=0.15,
                                 sensors=[[0.5, 0.5], [0.25, 0.75]],
                                 obs_times=[0.05, 0.1, 0.15])
        d = forward_map(lib, small_xi, spec)
        assert d.size == 6
        blocks = d.reshape(3, 2)
        assert not np.allclose(blocks[0], blocks[1])

    def test_obs_times_off_lattice_rejected(self, small_problem):
        mesh, _, _ = small_problem
        with pytest.raises(ValueError):
            case_forward_spec(mesh, dt=0.004, t_end=0.12, obs_times=[0.05])


class TestResponseSlices:
    def test_line_slice_shapes_and_boundary_values(self, small_problem,
                                                   small_xi, spec20):
        _, _, lib = small_problem
        slc = ResponseSlice(kind="line_y", x=0.35, t=0.05, n_points=41)
        coords, vals = response_slice(lib, small_xi, spec20, slc)
        assert coords.shape == vals.shape == (41,)
        g = 1.7 - 1.4 * 0.35
        assert np.isclose(vals[0], g, atol=1e-8)
        assert np.isclose(vals[-1], g, atol=1e-8)

    def test_time_slice_length(self, small_problem, small_xi, spec20):
        mesh, _, lib = small_problem
        slc = ResponseSlice(kind="time", x=0.35, y=0.5)
        coords, vals = response_slice(lib, small_xi, spec20, slc)
        n_steps = round(spec20.t_end / spec20.dt)
        assert coords.size == vals.size == n_steps + 1
        # the reconstructed initial state is the L2 projection of zero under
        # the incompatible boundary data, so it beats the bare lift in L2
        system = assemble_coarse(lib, small_xi)
        u0 = solve_parabolic_coarse(system, spec20, record_steps=[0])[0]
        mass = mesh.mass_matrix
        assert u0 @ (mass @ u0) <= spec20.dirichlet @ (mass @ spec20.dirichlet)

    def test_fine_and_surrogate_slices_agree_roughly(self, small_problem,
                                                     small_xi, spec20):
        # late slice time so the incompatible-initial-state transient has
        # relaxed; mini-scale space error remains percent level
        mesh, _, lib = small_problem
        slc = ResponseSlice(kind="line_x", y=0.65, t=0.1, n_points=31)
        _, sur = response_slice(lib, small_xi, spec20, slc)
        _, fine = fine_response_slice(mesh, small_xi, spec20, slc)
        assert np.max(np.abs(sur - fine)) < 5e-2
