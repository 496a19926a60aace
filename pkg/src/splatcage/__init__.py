"""splatcage: sketch-driven cage deformation of 3D Gaussian-splat scenes."""

from .cage import CageMesh, DeformedCage, build_cage, cage_resolution_sweep, extract_cage, sdf_grid
from .coords import CoordinateTables, compute_tables, evaluate_jacobian, evaluate_map
from .splats import Splat, SplatCloud, covariance, decompose_covariance, load_ply, save_ply

__version__ = "0.1.0"

__all__ = [
    "CageMesh",
    "DeformedCage",
    "CoordinateTables",
    "Splat",
    "SplatCloud",
    "build_cage",
    "cage_resolution_sweep",
    "compute_tables",
    "covariance",
    "decompose_covariance",
    "evaluate_jacobian",
    "evaluate_map",
    "extract_cage",
    "load_ply",
    "save_ply",
    "sdf_grid",
]
