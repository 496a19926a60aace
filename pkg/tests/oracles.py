"""Independent numerical oracles used by the test suite.

These deliberately avoid the code paths they check: coordinate integrals are
estimated by brute-force subdivided centroid quadrature, derivatives by
central finite differences, and containment by ray-free winding sums.
"""

import numpy as np

QUADRATURE_LEVELS = 6  # 4**6 sub-triangles per face


def subdivided_centroids(tri, levels=QUADRATURE_LEVELS):
    """Centroids and areas of the 4**levels refinement of triangle (3, 3)."""
    tris = tri[None]
    for _ in range(levels):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        tris = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
    cent = tris.mean(axis=1)
    areas = 0.5 * np.linalg.norm(
        np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1
    )
    return cent, areas


def quadrature_tables(cage, points, levels=QUADRATURE_LEVELS):
    """Brute-force phi (P, V) and psi (P, F) via the centroid rule."""
    verts, faces = cage.vertices, cage.faces
    P, V, F = len(points), len(verts), len(faces)
    phi = np.zeros((P, V))
    psi = np.zeros((P, F))
    for fi, f in enumerate(faces):
        tri = verts[f]
        cent, areas = subdivided_centroids(tri, levels)
        n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
        nhat = n / np.linalg.norm(n)
        # affine hat coefficients: w_j(x) = coef[:3] . x + coef[3]
        m = np.hstack([tri, np.ones((3, 1))])
        coefs = np.linalg.lstsq(m, np.eye(3), rcond=None)[0]
        for pi, p in enumerate(points):
            rvec = cent - p
            rnorm = np.linalg.norm(rvec, axis=1)
            psi[pi, fi] = np.sum(areas / rnorm) / (4 * np.pi)
            ddn = (rvec @ nhat) / rnorm**3
            for j in range(3):
                w = cent @ coefs[:3, j] + coefs[3, j]
                phi[pi, f[j]] += np.sum(w * ddn * areas) / (4 * np.pi)
    return phi, psi


def central_difference_jacobian(func, x, eps):
    """(out_dim, in_dim) Jacobian of func at flat vector x."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(func(x))
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        fp = np.asarray(func(x + dx)).ravel()
        fm = np.asarray(func(x - dx)).ravel()
        jac[:, i] = (fp - fm) / (2 * eps)
    return jac


def directional_derivative(func, x, direction, eps):
    """Scalar directional derivative of scalar-valued func by central FD."""
    d = direction / np.linalg.norm(direction.ravel())
    return (func(x + eps * d) - func(x - eps * d)) / (2 * eps)


def random_interior_points(cage, n, rng, margin=0.15):
    """Rejection-sample points inside the cage, at least `margin`*diag from it."""
    from splatcage.geometry import bbox_diagonal, point_triangle_distances, winding_numbers

    lo = cage.vertices.min(axis=0)
    hi = cage.vertices.max(axis=0)
    diag = bbox_diagonal(cage.vertices)
    out = []
    while len(out) < n:
        cand = rng.uniform(lo, hi, size=(4 * n, 3))
        wn = winding_numbers(cage.vertices, cage.faces, cand)
        cand = cand[wn > 0.5]
        if cand.size:
            d = point_triangle_distances(cand, cage.vertices, cage.faces)
            cand = cand[d > margin * diag]
            out.extend(cand)
    return np.array(out[:n])


def mask_iou(a, b, threshold=0.5):
    ab = a > threshold
    bb = b > threshold
    union = np.logical_or(ab, bb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ab, bb).sum() / union)
