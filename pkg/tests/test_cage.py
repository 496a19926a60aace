import numpy as np
import pytest

from splatcage.cage import (
    DECIMATION_FLOOR,
    CageMesh,
    build_cage,
    cage_resolution_sweep,
    decimate,
    extract_cage,
    load_obj,
    save_obj,
    sdf_grid,
)
from splatcage.errors import DegenerateInput, EmptyLevelSet, ResolutionOutOfRange
from splatcage.geometry import (
    euler_characteristic,
    icosphere,
    is_consistently_oriented,
    is_edge_manifold_closed,
    signed_volume,
    winding_numbers,
)


def sphere_samples(n, rng, radius=1.0):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


class TestSdfGrid:
    def test_single_point_corner_value(self):
        grid = sdf_grid(np.zeros((1, 3)), resolution=16, bounds=([-1, -1, -1], [1, 1, 1]))
        assert grid.values[0, 0, 0] == pytest.approx(np.sqrt(3.0), rel=1e-12)
        assert grid.values[-1, -1, -1] == pytest.approx(np.sqrt(3.0), rel=1e-12)

    def test_sphere_distance_oracle(self, rng):
        pts = sphere_samples(10_000, rng)
        grid = sdf_grid(pts, resolution=48, padding=0.3)
        axes = [
            grid.origin[i] + grid.spacing[i] * np.arange(grid.values.shape[i])
            for i in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        radii = np.sqrt(gx**2 + gy**2 + gz**2)
        analytic = np.abs(radii - 1.0)
        assert np.max(np.abs(grid.values - analytic)) < 2.0 * grid.cell_diag

    def test_collinear_rejected(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3.0, 0, 0]])
        with pytest.raises(DegenerateInput):
            sdf_grid(pts, resolution=16)

    def test_too_few_points_rejected(self):
        with pytest.raises(DegenerateInput):
            sdf_grid(np.zeros((3, 3)), resolution=16)

    def test_resolution_range(self, rng):
        pts = rng.normal(size=(10, 3))
        with pytest.raises(ResolutionOutOfRange):
            sdf_grid(pts, resolution=8)
        with pytest.raises(ResolutionOutOfRange):
            sdf_grid(pts, resolution=1024)


class TestExtractCage:
    @pytest.fixture(scope="class")
    def sphere_grid(self):
        rng = np.random.default_rng(7)
        pts = sphere_samples(10_000, rng)
        return pts, sdf_grid(pts, resolution=48, padding=0.35)

    def test_sphere_offset_oracle(self, sphere_grid):
        pts, grid = sphere_grid
        mesh = extract_cage(grid, offset=0.2, target_vertices=200)
        mesh.validate()
        assert euler_characteristic(mesh.vertices, mesh.faces) == 2
        radii = np.linalg.norm(mesh.vertices, axis=1)
        cell = grid.spacing.max()
        assert abs(radii.mean() - 1.2) < cell
        assert 180 <= mesh.n_vertices <= 220

    def test_containment(self, sphere_grid):
        pts, grid = sphere_grid
        mesh = extract_cage(grid, offset=0.2, target_vertices=300)
        wn = winding_numbers(mesh.vertices, mesh.faces, pts[:500])
        assert np.all(wn > 0.5)

    def test_tiny_budget_hits_floor(self, sphere_grid):
        _, grid = sphere_grid
        mesh = extract_cage(grid, offset=0.25, target_vertices=4)
        assert mesh.n_vertices >= DECIMATION_FLOOR
        mesh.validate()

    def test_empty_level_set(self, sphere_grid):
        _, grid = sphere_grid
        with pytest.raises(EmptyLevelSet):
            extract_cage(grid, offset=grid.values.max() + 1.0, target_vertices=100)

    def test_offset_monotone_volume(self, sphere_grid):
        _, grid = sphere_grid
        cell = grid.spacing.max()
        vols = []
        for off in (3.0 * cell, 4.5 * cell, 6.0 * cell):
            mesh = extract_cage(grid, offset=off, target_vertices=200)
            vols.append(signed_volume(mesh.vertices, mesh.faces))
        assert vols[0] <= vols[1] <= vols[2]

    def test_sweep(self, rng):
        pts = sphere_samples(4000, rng)
        cages = cage_resolution_sweep(pts, [100, 400], resolution=40)
        assert len(cages) == 2
        for cage, budget in zip(cages, [100, 400]):
            assert abs(cage.n_vertices - budget) <= 0.1 * budget
            assert np.all(winding_numbers(cage.vertices, cage.faces, pts[:200]) > 0.5)

    def test_sweep_empty(self):
        assert cage_resolution_sweep(np.zeros((0, 3)), []) == []


class TestDecimate:
    def test_icosphere_to_budget(self):
        v, f = icosphere(subdivisions=3)
        v2, f2 = decimate(v, f, 100)
        assert abs(len(v2) - 100) <= 10
        assert is_edge_manifold_closed(f2)
        assert is_consistently_oriented(f2)
        assert signed_volume(v2, f2) > 0
        assert euler_characteristic(v2, f2) == 2

    def test_preserves_shape(self):
        v, f = icosphere(subdivisions=3)
        v2, _ = decimate(v, f, 150)
        radii = np.linalg.norm(v2, axis=1)
        assert np.all(np.abs(radii - 1.0) < 0.1)


class TestObjIO:
    def test_round_trip(self, tmp_path, icosphere_cage):
        path = tmp_path / "cage.obj"
        save_obj(icosphere_cage, path)
        back = load_obj(path)
        np.testing.assert_allclose(back.vertices, icosphere_cage.vertices, atol=1e-15)
        np.testing.assert_array_equal(back.faces, icosphere_cage.faces)
        back.validate()


class TestBuildCage:
    def test_build_cage_contains_points(self, rng):
        pts = rng.normal(size=(2000, 3)) * np.array([1.0, 0.6, 0.4])
        mesh = build_cage(pts, resolution=40, offset_cells=3.0, target_vertices=150)
        mesh.validate()
        assert np.all(winding_numbers(mesh.vertices, mesh.faces, pts[:300]) > 0.5)
