import numpy as np
import pytest

from splatcage.cage import CageMesh
from splatcage.geometry import icosphere
from splatcage.splats import SplatCloud


def random_cloud(n, rng, center=(0, 0, 0), extent=1.0):
    """Random but valid splat cloud with raw-file-safe parameter ranges."""
    mu = rng.uniform(-extent, extent, size=(n, 3)) + np.asarray(center, dtype=float)
    scale = np.exp(rng.uniform(-3.0, 0.0, size=(n, 3)))
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    opacity = rng.uniform(0.1, 0.9, size=n)
    color = rng.uniform(-1.0, 1.0, size=(n, 3))
    return SplatCloud.from_arrays(mu, scale, rot, opacity, color)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def cloud100(rng):
    return random_cloud(100, rng)


@pytest.fixture(scope="session")
def unit_cube_cage():
    """12-triangle cube spanning [-1, 1]^3, outward oriented."""
    v = np.array(
        [[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)]
    )
    f = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # x = -1
            [4, 6, 7], [4, 7, 5],  # x = +1
            [0, 4, 5], [0, 5, 1],  # y = -1
            [2, 3, 7], [2, 7, 6],  # y = +1
            [0, 2, 6], [0, 6, 4],  # z = -1
            [1, 5, 7], [1, 7, 3],  # z = +1
        ],
        dtype=np.int64,
    )
    return CageMesh(v, f).validate()


@pytest.fixture(scope="session")
def icosphere_cage():
    v, f = icosphere(subdivisions=2, radius=1.0)
    return CageMesh(v, f).validate()


@pytest.fixture(scope="session")
def icosphere_cage_642():
    v, f = icosphere(subdivisions=3, radius=1.0)
    return CageMesh(v, f).validate()
