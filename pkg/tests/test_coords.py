import numpy as np
import pytest

from splatcage.coords import (
    compute_tables,
    evaluate_jacobian,
    evaluate_map,
    load_tables,
    save_tables,
    stretch_factors,
    tables_cache_key,
)
from splatcage.errors import ConnectivityMismatch, NearBoundary, PointOutsideCage
from splatcage.geometry import bbox_diagonal

from oracles import central_difference_jacobian, quadrature_tables, random_interior_points


@pytest.fixture(scope="module")
def cube_tables(unit_cube_cage):
    rng = np.random.default_rng(3)
    pts = np.vstack([[[0.0, 0.0, 0.0]], rng.uniform(-0.6, 0.6, size=(24, 3))])
    return pts, compute_tables(unit_cube_cage, pts)


class TestTables:
    def test_partition_of_unity(self, cube_tables):
        _, tables = cube_tables
        np.testing.assert_allclose(tables.phi.sum(axis=1), 1.0, atol=1e-6)

    def test_rest_reproduction(self, unit_cube_cage, cube_tables):
        pts, tables = cube_tables
        diag = bbox_diagonal(unit_cube_cage.vertices)
        rest = tables.phi @ unit_cube_cage.vertices + tables.psi @ unit_cube_cage.face_normals
        assert np.max(np.linalg.norm(rest - pts, axis=1)) < 1e-4 * diag

    def test_center_of_cube_exact(self, unit_cube_cage):
        tables = compute_tables(unit_cube_cage, np.zeros((1, 3)))
        mapped = evaluate_map(tables, unit_cube_cage.deformed(unit_cube_cage.vertices))
        np.testing.assert_allclose(mapped[0], 0.0, atol=1e-6)
        assert tables.phi.sum() == pytest.approx(1.0, abs=1e-6)

    def test_quadrature_oracle_icosphere(self, icosphere_cage_642):
        rng = np.random.default_rng(11)
        pts = random_interior_points(icosphere_cage_642, 20, rng, margin=0.15)
        tables = compute_tables(icosphere_cage_642, pts, with_gradients=False)
        phi_q, psi_q = quadrature_tables(icosphere_cage_642, pts, levels=4)
        assert np.max(np.abs(tables.phi - phi_q)) < 1e-3
        assert np.max(np.abs(tables.psi - psi_q)) < 1e-3

    def test_gradients_match_fd(self, unit_cube_cage):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-0.5, 0.5, size=(6, 3))
        tables = compute_tables(unit_cube_cage, pts)
        eps = 1e-5
        for i in range(len(pts)):
            def phi_at(q):
                t = compute_tables(unit_cube_cage, q[None], with_gradients=False)
                return np.concatenate([t.phi[0], t.psi[0]])

            jac = central_difference_jacobian(phi_at, pts[i], eps)
            analytic = np.concatenate([tables.grad_phi[i], tables.grad_psi[i]])
            scale = np.maximum(np.abs(jac), 1e-3)
            assert np.max(np.abs(jac - analytic) / scale) < 1e-3

    def test_point_outside_rejected(self, unit_cube_cage):
        with pytest.raises(PointOutsideCage) as e:
            compute_tables(unit_cube_cage, np.array([[2.0, 0.0, 0.0]]))
        assert e.value.index == 0

    def test_near_boundary_rejected(self, unit_cube_cage):
        with pytest.raises(NearBoundary):
            compute_tables(unit_cube_cage, np.array([[1.0 - 1e-8, 0.0, 0.0]]))


class TestEvaluateMap:
    def test_identity(self, unit_cube_cage, cube_tables):
        pts, tables = cube_tables
        diag = bbox_diagonal(unit_cube_cage.vertices)
        out = evaluate_map(tables, unit_cube_cage.deformed(unit_cube_cage.vertices))
        assert np.max(np.linalg.norm(out - pts, axis=1)) < 1e-4 * diag

    def test_translation(self, unit_cube_cage, cube_tables):
        pts, tables = cube_tables
        t = np.array([0.3, -1.2, 2.5])
        out = evaluate_map(tables, unit_cube_cage.deformed(unit_cube_cage.vertices + t))
        diag = bbox_diagonal(unit_cube_cage.vertices)
        assert np.max(np.linalg.norm(out - (pts + t), axis=1)) < 1e-4 * diag

    def test_global_rotation(self, icosphere_cage, rng):
        pts = random_interior_points(icosphere_cage, 12, rng, margin=0.12)
        tables = compute_tables(icosphere_cage, pts)
        theta = 0.7
        r = np.array(
            [
                [np.cos(theta), -np.sin(theta), 0],
                [np.sin(theta), np.cos(theta), 0],
                [0, 0, 1.0],
            ]
        )
        out = evaluate_map(tables, icosphere_cage.deformed(icosphere_cage.vertices @ r.T))
        diag = bbox_diagonal(icosphere_cage.vertices)
        assert np.max(np.linalg.norm(out - pts @ r.T, axis=1)) < 1e-3 * diag

    def test_uniform_scale(self, icosphere_cage, rng):
        pts = random_interior_points(icosphere_cage, 12, rng, margin=0.12)
        tables = compute_tables(icosphere_cage, pts)
        out = evaluate_map(tables, icosphere_cage.deformed(icosphere_cage.vertices * 2.0))
        diag = bbox_diagonal(icosphere_cage.vertices)
        assert np.max(np.linalg.norm(out - pts * 2.0, axis=1)) < 1e-3 * diag

    def test_connectivity_mismatch(self, unit_cube_cage, icosphere_cage, cube_tables):
        _, tables = cube_tables
        with pytest.raises(ConnectivityMismatch):
            evaluate_map(tables, icosphere_cage.deformed(icosphere_cage.vertices))


class TestJacobian:
    def test_identity_at_rest(self, icosphere_cage, rng):
        pts = random_interior_points(icosphere_cage, 10, rng, margin=0.12)
        tables = compute_tables(icosphere_cage, pts)
        jac = evaluate_jacobian(tables, icosphere_cage.deformed(icosphere_cage.vertices))
        assert np.max(np.abs(jac - np.eye(3))) < 1e-3

    def test_affine_oracle(self, icosphere_cage_642, rng):
        # rotation and uniform scale reproduce exactly under the scaled-normal
        # convention; the shear part is approximate and budgeted by the 1e-2
        pts = random_interior_points(icosphere_cage_642, 10, rng, margin=0.12)
        tables = compute_tables(icosphere_cage_642, pts)
        th = 0.5
        rot = np.array([[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1.0]])
        shear = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -0.5], [0.5, 0.0, 0.0]]) * 0.025
        a = rot @ (1.15 * np.eye(3) + shear)
        jac = evaluate_jacobian(tables, icosphere_cage_642.deformed(icosphere_cage_642.vertices @ a.T))
        assert np.max(np.abs(jac - a)) < 1e-2

    def test_fd_cross_check(self, icosphere_cage, rng):
        """Jacobian tables are the literal spatial derivative of the map."""
        pts = random_interior_points(icosphere_cage, 50, rng, margin=0.12)
        tables = compute_tables(icosphere_cage, pts)
        deformed = icosphere_cage.deformed(
            icosphere_cage.vertices + 0.1 * np.sin(icosphere_cage.vertices * 2.0)
        )
        jac = evaluate_jacobian(tables, deformed)
        eps = 1e-4 * bbox_diagonal(icosphere_cage.vertices)
        for axis in range(3):
            d = np.zeros(3)
            d[axis] = eps
            tp = compute_tables(icosphere_cage, pts + d, with_gradients=False)
            tm = compute_tables(icosphere_cage, pts - d, with_gradients=False)
            fd = (evaluate_map(tp, deformed) - evaluate_map(tm, deformed)) / (2 * eps)
            num = np.abs(jac[:, :, axis] - fd)
            den = np.maximum(np.abs(fd), 1e-2)
            assert np.max(num / den) < 1e-3


class TestStretch:
    def test_rest_is_one(self, icosphere_cage):
        sigma = stretch_factors(icosphere_cage, icosphere_cage.vertices)
        np.testing.assert_allclose(sigma, 1.0, atol=1e-12)

    def test_uniform_scale(self, icosphere_cage):
        sigma = stretch_factors(icosphere_cage, icosphere_cage.vertices * 3.0)
        np.testing.assert_allclose(sigma, 3.0, rtol=1e-12)

    def test_rigid_is_one(self, icosphere_cage, rng):
        from splatcage.splats import quat_to_matrix

        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        r = quat_to_matrix(q)
        sigma = stretch_factors(icosphere_cage, icosphere_cage.vertices @ r.T)
        np.testing.assert_allclose(sigma, 1.0, rtol=1e-12)


class TestCache:
    def test_round_trip(self, unit_cube_cage, cube_tables, tmp_path):
        pts, tables = cube_tables
        key = tables_cache_key(unit_cube_cage, pts)
        path = tmp_path / "tables.bin"
        save_tables(tables, path, key=key)
        back = load_tables(path, expected_key=key)
        np.testing.assert_array_equal(back.phi, tables.phi)
        np.testing.assert_array_equal(back.psi, tables.psi)
        np.testing.assert_array_equal(back.grad_phi, tables.grad_phi)
        np.testing.assert_array_equal(back.grad_psi, tables.grad_psi)
        np.testing.assert_array_equal(back.cage_faces, tables.cage_faces)

    def test_key_mismatch(self, unit_cube_cage, cube_tables, tmp_path):
        pts, tables = cube_tables
        path = tmp_path / "tables.bin"
        save_tables(tables, path, key="abc")
        with pytest.raises(ValueError):
            load_tables(path, expected_key="different")
