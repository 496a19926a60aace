"""Input validation helpers.

Small check_* utilities in the spirit of sklearn's validation module: coerce
to float64 arrays, verify shapes, and fail with informative messages before
any numerical work starts.
"""

import numpy as np

from .errors import DimensionMismatch


def check_points(x, name="points", min_points=1):
    """Coerce to a finite (N, 3) float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise ValueError(f"{name} needs at least {min_points} rows, got {arr.shape[0]}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_faces(f, n_vertices, name="faces"):
    """Coerce to an (F, 3) int array of valid vertex indices."""
    arr = np.asarray(f, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (F, 3), got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_vertices):
        raise ValueError(f"{name} contains out-of-range vertex indices")
    return arr


def check_mask(m, name="mask"):
    """Coerce to a 2-D float64 array with values in [0, 1]."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < -1e-9 or arr.max() > 1 + 1e-9):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def check_same_shape(a, b, name_a="a", name_b="b"):
    if a.shape != b.shape:
        raise DimensionMismatch(f"{name_a} shape {a.shape} != {name_b} shape {b.shape}")


def check_matrices(m, n=None, name="matrices"):
    """Coerce to an (F, 3, 3) stack of matrices, optionally of known length."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 2 and arr.shape == (3, 3):
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (3, 3):
        raise ValueError(f"{name} must have shape (F, 3, 3), got {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} has {arr.shape[0]} entries, expected {n}")
    return arr


def check_finite(arr, stage):
    """NaN guard used on optimizer-internal arrays; raises NaNDetected."""
    from .errors import NaNDetected

    if not np.isfinite(arr).all():
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NaNDetected(stage, f"{bad} non-finite entries of {arr.shape}")
    return arr
