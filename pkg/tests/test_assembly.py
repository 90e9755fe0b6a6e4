"""Operator assembly against hand-computed integrals and exact identities.

Every bilinear form of the discretization has polynomial integrands, and the
assembly rules are chosen to integrate them exactly, so most checks here use
equality tolerances near machine precision rather than discretization-error
tolerances.
"""

import numpy as np
import pytest

from nsdarcy import assembly as asm
from nsdarcy.fem import CoupledSpace, QuadratureRule, edge_shape_values
from nsdarcy.mesh import FLUID, POROUS, build_rectangle_mesh, refine_uniform


@pytest.fixture(scope="module")
def space():
    return CoupledSpace(refine_uniform(build_rectangle_mesh(2, 4, 1.0)))


@pytest.fixture(scope="module")
def params(space):
    return asm.ModelParams(space.mesh, nu=0.1)


def random_velocity(space, rng):
    return space.velocity_node_values(rng.standard_normal(space.num_velocity_dofs))


class TestModelParams:
    def test_scalar_and_matrix_permeability(self, space):
        p1 = asm.ModelParams(space.mesh, nu=1.0, K=2.0)
        assert p1.lambda_min == p1.lambda_max == pytest.approx(2.0)
        K = np.array([[2.0, 1.0], [1.0, 3.0]])
        p2 = asm.ModelParams(space.mesh, nu=1.0, K=K)
        lams = np.linalg.eigvalsh(K)
        assert p2.lambda_min == pytest.approx(lams[0])
        assert p2.lambda_max == pytest.approx(lams[1])

    def test_callable_permeability_sampled_per_triangle(self, space):
        p = asm.ModelParams(space.mesh, nu=1.0,
                            K=lambda x, y: (1.0 + y) * np.eye(2))
        bary = space.mesh.vertices[
            space.mesh.triangles[space.mesh.porous_triangles()]].mean(axis=1)
        assert np.allclose(p.K_elems[:, 0, 0], 1.0 + bary[:, 1])
        assert p.lambda_max <= 2.0

    def test_invalid_parameters(self, space):
        mesh = space.mesh
        with pytest.raises(asm.ParameterError):
            asm.ModelParams(mesh, nu=0.0)
        with pytest.raises(asm.ParameterError):
            asm.ModelParams(mesh, nu=1.0, G=-1.0)
        with pytest.raises(asm.ParameterError):
            asm.ModelParams(mesh, nu=1.0, sigma=0.0)
        with pytest.raises(asm.ParameterError):
            asm.ModelParams(mesh, nu=1.0, K=np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(asm.ParameterError):
            asm.ModelParams(mesh, nu=1.0, K=np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_effective_sigma(self, space):
        p = asm.ModelParams(space.mesh, nu=0.25)
        assert p.effective_sigma() == pytest.approx(0.25 * space.mesh.h)
        assert asm.ModelParams(space.mesh, nu=0.25, sigma=7.0).effective_sigma() == 7.0

    def test_rebind(self, space):
        p = asm.ModelParams(space.mesh, nu=1.0, K=lambda x, y: (1.0 + y) * np.eye(2))
        fine = refine_uniform(space.mesh)
        q = p.rebind(fine)
        assert len(q.K_elems) == len(fine.porous_triangles())
        assert q.nu == p.nu and q.G == p.G


class TestStrain:
    def test_linear_field_oracle(self, space):
        # u = (x, -y): D(u) = diag(1, -1), D:D = 2, fluid area 1
        coords = space.node_coords(2)
        u = np.column_stack([coords[:, 0], -coords[:, 1]])
        assert asm.strain_energy(space, u, FLUID) == pytest.approx(2.0, abs=1e-12)
        A = asm.strain_matrix(space, FLUID, expanded=True)
        assert u.ravel() @ (A @ u.ravel()) == pytest.approx(2.0, abs=1e-12)
        # porous region through the companion map, same field
        Ap = asm.strain_matrix(space, POROUS, expanded=True)
        assert u.ravel() @ (Ap @ u.ravel()) == pytest.approx(2.0, abs=1e-12)

    def test_rigid_motions_are_null(self, space):
        coords = space.node_coords(2)
        for u in (np.tile([3.0, -2.0], (len(coords), 1)),
                  np.column_stack([-coords[:, 1], coords[:, 0]])):
            assert asm.strain_energy(space, u, FLUID) < 1e-13

    def test_symmetry_and_agreement(self, space):
        A = asm.strain_matrix(space, FLUID, expanded=True)
        assert abs(A - A.T).max() < 1e-13
        rng = np.random.default_rng(1)
        u, v = random_velocity(space, rng), random_velocity(space, rng)
        quad = 0.25 * (asm.strain_energy(space, u + v, FLUID)
                       - asm.strain_energy(space, u - v, FLUID))
        assert u.ravel() @ (A @ v.ravel()) == pytest.approx(quad, abs=1e-11)

    def test_coefficient_scaling(self, space):
        A1 = asm.strain_matrix(space, FLUID)
        A2 = asm.strain_matrix(space, FLUID, coefficient=2.0)
        assert abs(A2 - 2 * A1).max() < 1e-14


class TestDarcy:
    def test_identity_permeability_oracle(self, space, params):
        phi = space.node_coords(1)[:, 1].copy()  # phi = y, porous area 1
        assert asm.darcy_energy(space, phi, params) == pytest.approx(1.0, abs=1e-12)

    def test_anisotropic_oracle(self, space):
        K = np.array([[2.0, 1.0], [1.0, 3.0]])
        p = asm.ModelParams(space.mesh, nu=1.0, K=K)
        coords = space.node_coords(1)
        phi = coords[:, 0] + coords[:, 1]  # grad = (1,1): K grad . grad = 7
        assert asm.darcy_energy(space, phi, p) == pytest.approx(7.0, abs=1e-12)
        A = asm.darcy_matrix(space, p, expanded=True)
        assert phi @ (A @ phi) == pytest.approx(7.0, abs=1e-12)
        assert abs(A - A.T).max() < 1e-13

    def test_quadratic_head_space(self):
        space = CoupledSpace(build_rectangle_mesh(2, 4, 1.0), head_degree=2)
        p = asm.ModelParams(space.mesh, nu=1.0)
        coords = space.node_coords(2)
        phi = coords[:, 1] * (1 - coords[:, 1])  # |grad|^2 = (1-2y)^2
        # int over [0,1]x[0,1] of (1-2y)^2 = 1/3
        assert asm.darcy_energy(space, phi, p) == pytest.approx(1 / 3, abs=1e-12)


class TestDivergence:
    def test_oracle(self, space):
        # u = (x, 0): div u = 1; q = x: integral of x over the fluid strip = 1/2
        coords = space.node_coords(2)
        u = np.zeros((len(coords), 2))
        u[:, 0] = coords[:, 0]
        q = space.mesh.vertices[:, 0].copy()
        assert asm.divergence_value(space, q, u, FLUID) == pytest.approx(0.5, abs=1e-12)
        B = asm.divergence_matrix(space, FLUID, expanded=True)
        assert q @ (B @ u.ravel()) == pytest.approx(0.5, abs=1e-12)

    def test_divergence_free_field(self, space):
        coords = space.node_coords(2)
        u = np.column_stack([-coords[:, 1], coords[:, 0]])
        rng = np.random.default_rng(2)
        q = rng.standard_normal(space.mesh.num_vertices)
        assert abs(asm.divergence_value(space, q, u, FLUID)) < 1e-12

    def test_restricted_shape(self, space):
        B = asm.divergence_matrix(space)
        assert B.shape == (space.num_pressure_dofs, space.num_velocity_dofs)
        D = asm.aux_divergence_matrix(space)
        assert D.shape == (space.num_porous_vertices, space.num_aux_dofs)


class TestConvection:
    def test_oracle(self, space):
        # w = (1,0), u = (x^2, 0), v = (1,0): integrand 2x over the fluid strip
        coords = space.node_coords(2)
        w = np.tile([1.0, 0.0], (len(coords), 1))
        u = np.zeros_like(w)
        u[:, 0] = coords[:, 0] ** 2
        assert asm.convection_value(space, w, u, w, FLUID) == pytest.approx(
            1.0, abs=1e-12)

    def test_matrix_matches_evaluator(self, space):
        rng = np.random.default_rng(3)
        w, u, v = (random_velocity(space, rng) for _ in range(3))
        C = asm.convection_matrix(space, w, expanded=True)
        assert v.ravel() @ (C @ u.ravel()) == pytest.approx(
            asm.convection_value(space, w, u, v, FLUID), rel=1e-12, abs=1e-13)

    def test_plain_form_integration_by_parts(self, space):
        # ((w.grad)u, v) + ((w.grad)v, u) = int_bdry (u.v)(w.n) - (div w, u.v)
        # for fields vanishing on the outer fluid boundary, so only the
        # interface contributes
        rng = np.random.default_rng(4)
        for _ in range(5):
            w, u, v = (random_velocity(space, rng) for _ in range(3))
            lhs = (asm.convection_value(space, w, u, v, FLUID, skew=False)
                   + asm.convection_value(space, w, v, u, FLUID, skew=False))
            rhs = (asm.interface_uv_flux(space, u, v, w)
                   - asm.divdot_value(space, w, u, v, FLUID))
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-11)

    def test_skew_form_antisymmetry_identity(self, space):
        rng = np.random.default_rng(5)
        for _ in range(5):
            w, u, v = (random_velocity(space, rng) for _ in range(3))
            lhs = (asm.convection_value(space, w, u, v, FLUID)
                   + asm.convection_value(space, w, v, u, FLUID))
            assert lhs == pytest.approx(asm.interface_uv_flux(space, u, v, w),
                                        rel=1e-12, abs=1e-11)

    def test_wind_linearity(self, space):
        rng = np.random.default_rng(6)
        w1, w2 = random_velocity(space, rng), random_velocity(space, rng)
        C = asm.convection_matrix(space, 2 * w1 - w2)
        C12 = 2 * asm.convection_matrix(space, w1) - asm.convection_matrix(space, w2)
        assert abs(C - C12).max() < 1e-12

    def test_newton_block_completes_expansion(self, space):
        # trilinearity: C(w+d)(w+d) - C(w)w = C(w)d + N'(w)d + C(d)d exactly
        rng = np.random.default_rng(7)
        w, d = random_velocity(space, rng), random_velocity(space, rng)
        C = lambda a: asm.convection_matrix(space, a, expanded=True)
        N = asm.newton_convection_matrix(space, w, expanded=True)
        lhs = C(w + d) @ (w + d).ravel() - C(w) @ w.ravel()
        rhs = C(w) @ d.ravel() + N @ d.ravel() + C(d) @ d.ravel()
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_companion_region_identity(self, space):
        # interior companion fields: ((w.grad)v, v) = -1/2 (div w, |v|^2)
        rng = np.random.default_rng(8)
        co = rng.standard_normal(space.num_aux_dofs)
        for n in space.interface_nodes:
            dof = space.aux_node_dof[n]
            if dof >= 0:
                co[dof:dof + 2] = 0.0
        v = space.aux_node_values(co)
        w = space.aux_node_values(rng.standard_normal(space.num_aux_dofs))
        lhs = asm.convection_value(space, w, v, v, POROUS, skew=False)
        rhs = -0.5 * asm.divdot_value(space, w, v, v, POROUS)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


class TestInterface:
    def test_bjs_oracle(self, space):
        coords = space.node_coords(2)
        u = np.tile([1.0, 0.0], (len(coords), 1))  # u.tau = 1 on the interface
        assert asm.bjs_energy(space, u) == pytest.approx(1.0, abs=1e-13)
        assert asm.bjs_energy(space, u, coefficient=2.5) == pytest.approx(
            2.5, abs=1e-13)
        M1 = asm.bjs_matrix(space, coefficient=1.0)
        M2 = asm.bjs_matrix(space, coefficient=2.0)
        assert abs(M2 - 2 * M1).max() < 1e-14

    def test_normal_component_ignored_by_bjs(self, space):
        coords = space.node_coords(2)
        u = np.tile([0.0, 1.0], (len(coords), 1))
        assert asm.bjs_energy(space, u) < 1e-14

    def test_coupling_oracle(self, space):
        # u = (0,1) has u.n_f = -1 on the interface, phi = 1: integral -1
        coords = space.node_coords(2)
        u = np.tile([0.0, 1.0], (len(coords), 1))
        phi = np.ones(space.num_nodes(space.head_degree))
        assert asm.interface_head_flux(space, u, phi) == pytest.approx(
            -1.0, abs=1e-13)
        Cup = asm.interface_coupling_matrix(space, expanded=True)
        assert u.ravel() @ (Cup @ phi) == pytest.approx(-1.0, abs=1e-13)

    def test_coupling_matches_evaluator(self, space):
        rng = np.random.default_rng(9)
        u = random_velocity(space, rng)
        phi = space.head_node_values(rng.standard_normal(space.num_head_dofs))
        Cup = asm.interface_coupling_matrix(space, expanded=True)
        assert u.ravel() @ (Cup @ phi) == pytest.approx(
            asm.interface_head_flux(space, u, phi), rel=1e-12, abs=1e-13)

    def test_uv_flux_oracle(self, space):
        coords = space.node_coords(2)
        ex = np.tile([1.0, 0.0], (len(coords), 1))
        down = np.tile([0.0, -1.0], (len(coords), 1))
        assert asm.interface_uv_flux(space, ex, ex, down) == pytest.approx(
            1.0, abs=1e-13)
        assert asm.gamma_term(space, down) == pytest.approx(0.5, abs=1e-13)


class TestLoads:
    def test_volume_load_oracle(self, space):
        p = asm.ModelParams(space.mesh, nu=1.0, g_f=lambda x, y: (1.0, 0.0),
                            g_p=lambda x, y: 2.0)
        coords = space.node_coords(2)
        u = np.tile([1.0, 0.0], (len(coords), 1))
        phi = np.ones(space.num_nodes(space.head_degree))
        # (g_f, u) = |fluid| = 1 and (g_p, phi) = 2 |porous| = 2
        assert asm.load_value(space, p, u, phi) == pytest.approx(3.0, abs=1e-12)

    def test_load_vector_matches_value(self, space):
        p = asm.ModelParams(space.mesh, nu=1.0,
                            g_f=lambda x, y: (np.sin(x + y), np.cos(x * y)),
                            g_p=lambda x, y: np.exp(x - y))
        b = load = asm.load_vector(space, p)
        rng = np.random.default_rng(10)
        x = rng.standard_normal(space.num_total_dofs)
        u, press, phi = space.split_state(x)
        val = asm.load_value(space, p, space.velocity_node_values(u),
                             space.head_node_values(phi))
        assert b @ x == pytest.approx(val, rel=1e-12)
        assert np.all(load[space.offset_p:space.offset_phi] == 0.0)

    def test_interface_residual_loads(self, space):
        b = asm.interface_residual_loads(space,
                                         r_mass=lambda x, y: 1.0 + x,
                                         r_normal=lambda x, y: x,
                                         r_tangential=lambda x, y: 2.0)
        rng = np.random.default_rng(11)
        x = rng.standard_normal(space.num_total_dofs)
        u, _, phi = space.split_state(x)
        u_raw = space.velocity_node_values(u)
        phi_raw = space.head_node_values(phi)
        # independent edge quadrature of the defining integrals
        rule = QuadratureRule.edge(11)
        sv = edge_shape_values(space.velocity_degree, rule.points)
        sh = edge_shape_values(space.head_degree, rule.points)
        expect = 0.0
        for i, (a, bb) in enumerate(space.mesh.interface_edges):
            pa, pb = space.mesh.vertices[a], space.mesh.vertices[bb]
            xq = pa + rule.points[:, None] * (pb - pa)
            w = rule.weights * space.iface_lengths[i]
            uq = sv @ u_raw[space.iface_edge_nodes[i]]
            pq = sh @ phi_raw[space.iface_edge_head_nodes[i]]
            un = uq @ space.iface_normals[i]
            ut = uq @ space.iface_tangents[i]
            expect -= w @ (xq[:, 0] * un + 2.0 * ut + (1.0 + xq[:, 0]) * pq)
        assert b @ x == pytest.approx(expect, rel=1e-12, abs=1e-13)

    def test_pressure_rows_untouched(self, space):
        b = asm.interface_residual_loads(space, r_normal=lambda x, y: 1.0)
        assert np.all(b[space.offset_p:space.offset_phi] == 0.0)
        assert np.all(b[space.offset_phi:] == 0.0)


class TestPressureHelpers:
    def test_mass_row_sums_equal_mean_vector(self, space):
        M = asm.pressure_mass_matrix(space)
        m = asm.pressure_mean_vector(space)
        assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), m, atol=1e-14)
        assert m.sum() == pytest.approx(1.0, abs=1e-12)  # fluid area

    def test_mean_vector_integrates_p1_fields(self, space):
        q = space.mesh.vertices[:, 0].copy()
        m = asm.pressure_mean_vector(space)
        qf = q[asm.expanded_index(space, "pressure")]
        assert m @ qf == pytest.approx(0.5, abs=1e-12)  # int of x over the strip


class TestExport:
    def test_matrix_market_roundtrip(self, space, tmp_path):
        from scipy.io import mmread
        A = asm.strain_matrix(space, FLUID)
        path = tmp_path / "strain.mtx"
        asm.export_matrix_market(A, path, comment="strain")
        B = mmread(path)
        assert abs(A - B.tocsr()).max() < 1e-15
