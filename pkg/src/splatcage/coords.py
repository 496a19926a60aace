"""Cage coordinates: boundary-integral vertex/face weights and their gradients.

For a point p strictly inside a closed triangle cage, the harmonic map that
agrees with a piecewise-linear boundary deformation can be written

    f(p) = sum_v phi_v(p) * a_v  +  sum_t psi_t(p) * b_t

where a_v are deformed vertex positions and b_t scaled deformed face normals.
phi comes from the double-layer kernel (normal derivative of 1/(4*pi*r))
weighted by the per-face linear hat functions; psi from the single-layer
kernel (1/(4*pi*r)) with a constant weight per face. Both integrals and
their p-gradients have closed forms built from per-edge log terms, the
per-face signed solid angle, and its Biot-Savart-style edge gradient; all are
assembled here fully vectorized over (points x faces).

Conventions that make rest reproduction hold exactly:
    sum_v phi_v(p) = 1,   sum_v phi_v(p) V_v + sum_t psi_t(p) n_t = p,
with n_t the outward unit rest normals.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix

from .errors import ConnectivityMismatch, NearBoundary, PointOutsideCage
from .geometry import bbox_diagonal, point_triangle_distances, winding_numbers

FOUR_PI = 4.0 * np.pi
_NEAR_BOUNDARY_FRAC = 1e-6


@dataclass
class CoordinateTables:
    """Dense coordinate tables at a fixed set of evaluation points."""

    phi: np.ndarray        # (P, V)
    psi: np.ndarray        # (P, F)
    grad_phi: np.ndarray   # (P, V, 3)
    grad_psi: np.ndarray   # (P, F, 3)
    rest_points: np.ndarray  # (P, 3)
    cage_vertices: np.ndarray
    cage_faces: np.ndarray

    @property
    def n_points(self):
        return self.phi.shape[0]

    def matches(self, cage) -> bool:
        return (
            cage.faces.shape == self.cage_faces.shape
            and np.array_equal(cage.faces, self.cage_faces)
        )

    def grad_matrices(self):
        """(P*3, V) and (P*3, F) gradient tables laid out for one dgemm each."""
        if not hasattr(self, "_gphi_mat"):
            p = self.n_points
            self._gphi_mat = np.ascontiguousarray(self.grad_phi.transpose(0, 2, 1).reshape(p * 3, -1))
            self._gpsi_mat = np.ascontiguousarray(self.grad_psi.transpose(0, 2, 1).reshape(p * 3, -1))
        return self._gphi_mat, self._gpsi_mat


def _edge_cyclic(tri_pts):
    """Edge start/end arrays for the 3 directed edges of each face."""
    starts = tri_pts
    ends = tri_pts[:, [1, 2, 0], :]
    return starts, ends


def _hat_gradients(tri_pts, normals, areas):
    """In-plane gradients g_j of the three hat functions per face. (F, 3, 3)."""
    g = np.empty_like(tri_pts)
    for j in range(3):
        e = tri_pts[:, (j + 2) % 3, :] - tri_pts[:, (j + 1) % 3, :]
        g[:, j, :] = np.cross(normals, e) / (2.0 * areas)[:, None]
    return g


def compute_tables(cage, points, chunk=64, with_gradients=True) -> CoordinateTables:
    """Coordinate tables (and gradients) for points strictly inside `cage`.

    Raises PointOutsideCage / NearBoundary before doing any integral work.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    verts = cage.vertices
    faces = cage.faces
    diag = bbox_diagonal(verts)

    wn = winding_numbers(verts, faces, points)
    outside = np.nonzero(wn <= 0.5)[0]
    if outside.size:
        raise PointOutsideCage(int(outside[0]))
    dist = point_triangle_distances(points, verts, faces)
    near = np.nonzero(dist < _NEAR_BOUNDARY_FRAC * diag)[0]
    if near.size:
        raise NearBoundary(int(near[0]))

    P = points.shape[0]
    V = verts.shape[0]
    F = faces.shape[0]

    tri = verts[faces]  # (F, 3, 3)
    normals = cage.face_normals
    areas = cage.face_areas
    g = _hat_gradients(tri, normals, areas)  # (F, 3vert, 3xyz)

    # scatter matrices: per-slot face values -> vertex columns
    scatter = [
        csr_matrix((np.ones(F), (np.arange(F), faces[:, j])), shape=(F, V))
        for j in range(3)
    ]

    phi = np.zeros((P, V))
    psi = np.empty((P, F))
    grad_phi = np.zeros((P, V, 3)) if with_gradients else None
    grad_psi = np.empty((P, F, 3)) if with_gradients else None

    starts, ends = _edge_cyclic(tri)

    for s in range(0, P, chunk):
        pc = points[s : s + chunk]  # (n, 3)
        n = pc.shape[0]

        h = np.einsum("fi,nfi->nf", normals, tri[:, 0, :][None] - pc[:, None, :])
        p0 = pc[:, None, :] + h[..., None] * normals[None]  # (n, F, 3)

        # signed solid angle, van Oosterom-Strackee
        r = tri[None] - pc[:, None, None, :]  # (n, F, 3, 3)
        rn = np.linalg.norm(r, axis=3)
        num = np.einsum("nfi,nfi->nf", r[:, :, 0], np.cross(r[:, :, 1], r[:, :, 2]))
        den = (
            rn[:, :, 0] * rn[:, :, 1] * rn[:, :, 2]
            + np.einsum("nfi,nfi->nf", r[:, :, 0], r[:, :, 1]) * rn[:, :, 2]
            + np.einsum("nfi,nfi->nf", r[:, :, 0], r[:, :, 2]) * rn[:, :, 1]
            + np.einsum("nfi,nfi->nf", r[:, :, 1], r[:, :, 2]) * rn[:, :, 0]
        )
        omega = 2.0 * np.arctan2(num, den)  # (n, F)

        S = np.zeros((n, F))
        K = np.zeros((n, F, 3))
        E_edges = np.empty((3, n, F))
        gradE_edges = np.empty((3, n, F, 3)) if with_gradients else None
        mhats = np.empty((3, F, 3))
        grad_omega = np.zeros((n, F, 3)) if with_gradients else None

        for k in range(3):
            a = starts[:, k, :]  # (F, 3)
            b = ends[:, k, :]
            sv = b - a
            slen = np.linalg.norm(sv, axis=1)
            shat = sv / slen[:, None]
            mhat = np.cross(shat, normals)
            mhats[k] = mhat

            ra = a[None] - pc[:, None, :]  # (n, F, 3)
            rb = b[None] - pc[:, None, :]
            Rm = np.linalg.norm(ra, axis=2)
            Rp = np.linalg.norm(rb, axis=2)
            lm = np.einsum("nfi,fi->nf", a[None] - p0, shat)
            lp = np.einsum("nfi,fi->nf", b[None] - p0, shat)
            t0 = np.einsum("nfi,fi->nf", a[None] - p0, mhat)

            pos_branch = (lm + lp) >= 0
            with np.errstate(divide="ignore", invalid="ignore"):
                E_pos = np.log((Rp + lp) / (Rm + lm))
                E_neg = np.log((Rm - lm) / (Rp - lp))
            E = np.where(pos_branch, E_pos, E_neg)
            E = np.where(np.isfinite(E), E, 0.0)
            E_edges[k] = E

            S += t0 * E
            K -= mhat[None] * E[..., None]

            if with_gradients:
                gE_pos = (-rb / Rp[..., None] - shat[None]) / (Rp + lp)[..., None] - (
                    -ra / Rm[..., None] - shat[None]
                ) / (Rm + lm)[..., None]
                gE_neg = (-ra / Rm[..., None] + shat[None]) / (Rm - lm)[..., None] - (
                    -rb / Rp[..., None] + shat[None]
                ) / (Rp - lp)[..., None]
                gE = np.where(pos_branch[..., None], gE_pos, gE_neg)
                gE = np.where(np.isfinite(gE), gE, 0.0)
                gradE_edges[k] = gE

                # Biot-Savart edge term of the solid-angle gradient
                foot = a[None] - lm[..., None] * shat[None]  # (n, F, 3)
                w = foot - pc[:, None, :]
                c2 = np.einsum("nfi,nfi->nf", w, w)
                numer = lp * Rm - lm * Rp
                # cancellation-safe rewrite when both edge params share a sign
                both_pos = (lm >= 0) & (lp >= 0)
                both_neg = (lm <= 0) & (lp <= 0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    safe_pos = c2 * (lp**2 - lm**2) / (lp * Rm + lm * Rp)
                    safe_neg = c2 * (lm**2 - lp**2) / (-lm * Rp - lp * Rm)
                numer = np.where(both_pos, safe_pos, numer)
                numer = np.where(both_neg, safe_neg, numer)
                numer = np.where(np.isfinite(numer), numer, 0.0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    coef = numer / (c2 * Rp * Rm)
                coef = np.where((c2 > 1e-30) & np.isfinite(coef), coef, 0.0)
                grad_omega -= np.cross(np.broadcast_to(shat[None], w.shape), w) * coef[..., None]

        S -= h * omega
        psi[s : s + n] = S / FOUR_PI
        if with_gradients:
            grad_psi[s : s + n] = (K + omega[..., None] * normals[None]) / FOUR_PI

        # hat values at the projected point (affine extension)
        c_hat = np.empty((n, F, 3))
        d0 = p0 - tri[None, :, 0, :]
        for j in range(3):
            c_hat[:, :, j] = (1.0 if j == 0 else 0.0) + np.einsum("nfi,fi->nf", d0, g[:, j, :])

        gK = np.einsum("fji,nfi->nfj", g, K)  # (n, F, 3slots)
        for j in range(3):
            D_j = c_hat[:, :, j] * omega + h * gK[:, :, j]
            phi[s : s + n] += (D_j @ scatter[j]) / FOUR_PI
            if with_gradients:
                gm = np.einsum("fi,kfi->fk", g[:, j, :], mhats)  # (F, 3edges)
                hterm = -np.einsum("fk,knfi->nfi", gm, gradE_edges) * h[..., None]
                gD = (
                    omega[..., None] * g[None, :, j, :]
                    + c_hat[:, :, j, None] * grad_omega
                    - gK[:, :, j, None] * normals[None]
                    + hterm
                )
                for c in range(3):
                    grad_phi[s : s + n, :, c] += (gD[:, :, c] @ scatter[j]) / FOUR_PI

    return CoordinateTables(
        phi=phi,
        psi=psi,
        grad_phi=grad_phi,
        grad_psi=grad_psi,
        rest_points=points,
        cage_vertices=verts.copy(),
        cage_faces=faces.copy(),
    )


# ---------------------------------------------------------------------------
# evaluation under a deformed cage


def stretch_factors(rest_cage, deformed_vertices):
    """Per-face scale of the deformed normals.

    sigma_t = sqrt(|u'|^2 |v|^2 - 2 (u'.v')(u.v) + |v'|^2 |u|^2) / (sqrt(8) A_rest)
    with (u, v) rest edges and (u', v') their deformed images; equals the
    uniform scale factor for similarity transforms of the face.
    """
    f = rest_cage.faces
    u = rest_cage.vertices[f[:, 1]] - rest_cage.vertices[f[:, 0]]
    v = rest_cage.vertices[f[:, 2]] - rest_cage.vertices[f[:, 0]]
    up = deformed_vertices[f[:, 1]] - deformed_vertices[f[:, 0]]
    vp = deformed_vertices[f[:, 2]] - deformed_vertices[f[:, 0]]
    g = (
        np.einsum("ij,ij->i", up, up) * np.einsum("ij,ij->i", v, v)
        - 2.0 * np.einsum("ij,ij->i", up, vp) * np.einsum("ij,ij->i", u, v)
        + np.einsum("ij,ij->i", vp, vp) * np.einsum("ij,ij->i", u, u)
    )
    return np.sqrt(np.maximum(g, 0.0)) / (np.sqrt(8.0) * rest_cage.face_areas)


def scaled_normals(cage_def):
    """b_t of a deformed cage: stretch factor times deformed unit normal."""
    sigma = stretch_factors(cage_def.rest, cage_def.vertices)
    return sigma[:, None] * cage_def.face_normals()


def evaluate_map(tables: CoordinateTables, cage_def):
    """Deformed positions of the table's rest points. (P, 3)."""
    if not tables.matches(cage_def.rest):
        raise ConnectivityMismatch("tables were computed for a different cage")
    b = scaled_normals(cage_def)
    return tables.phi @ cage_def.vertices + tables.psi @ b


def evaluate_jacobian(tables: CoordinateTables, cage_def):
    """Spatial Jacobian of the cage map at every rest point. (P, 3, 3)."""
    if not tables.matches(cage_def.rest):
        raise ConnectivityMismatch("tables were computed for a different cage")
    b = scaled_normals(cage_def)
    p = tables.n_points
    # J[p, r, c] = sum_v a[v, r] gphi[p, v, c] + sum_t b[t, r] gpsi[p, t, c]
    gphi, gpsi = tables.grad_matrices()
    j = gphi @ cage_def.vertices + gpsi @ b
    return j.reshape(p, 3, 3).transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# binary cache keyed by content hash of (cage, points)

_CACHE_MAGIC = b"SCGC"
_CACHE_VERSION = 2


def tables_cache_key(cage, points):
    hsh = hashlib.sha256()
    hsh.update(np.ascontiguousarray(cage.vertices).tobytes())
    hsh.update(np.ascontiguousarray(cage.faces).tobytes())
    hsh.update(np.ascontiguousarray(np.atleast_2d(points)).tobytes())
    return hsh.hexdigest()


def save_tables(tables: CoordinateTables, path, key=""):
    blocks = [
        tables.phi, tables.psi, tables.grad_phi, tables.grad_psi,
        tables.rest_points, tables.cage_vertices,
    ]
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<I", _CACHE_VERSION))
        key_b = key.encode()
        f.write(struct.pack("<I", len(key_b)))
        f.write(key_b)
        f.write(struct.pack("<I", len(blocks) + 1))
        for arr in blocks:
            _write_block(f, np.asarray(arr, dtype=np.float64))
        _write_block(f, tables.cage_faces.astype(np.float64))


def _write_block(f, arr):
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_block(f):
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}q", f.read(8 * ndim))
    n = int(np.prod(shape))
    return np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()


def load_tables(path, expected_key=None) -> CoordinateTables:
    with open(path, "rb") as f:
        if f.read(4) != _CACHE_MAGIC:
            raise ValueError("not a coordinate-table cache file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _CACHE_VERSION:
            raise ValueError(f"unsupported cache version {version}")
        (klen,) = struct.unpack("<I", f.read(4))
        key = f.read(klen).decode()
        if expected_key is not None and key != expected_key:
            raise ValueError("cache key mismatch (cage or points changed)")
        (nblocks,) = struct.unpack("<I", f.read(4))
        blocks = [_read_block(f) for _ in range(nblocks)]
    phi, psi, grad_phi, grad_psi, rest_points, cage_vertices, faces = blocks
    return CoordinateTables(
        phi=phi,
        psi=psi,
        grad_phi=grad_phi,
        grad_psi=grad_psi,
        rest_points=rest_points,
        cage_vertices=cage_vertices,
        cage_faces=faces.astype(np.int64),
    )
