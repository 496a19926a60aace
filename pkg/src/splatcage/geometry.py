"""Triangle-mesh utilities: normals, manifold checks, winding numbers, distances.

Everything operates on plain (V, 3) float64 vertex arrays and (F, 3) int64
face arrays; meshes are assumed triangular throughout.
"""

import numpy as np


def face_normals_areas(vertices, faces):
    """Per-face unit normals and areas. Degenerate faces get a zero normal."""
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    cross = np.cross(e1, e2)
    norms = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norms
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = np.where(norms[:, None] > 0, cross / np.maximum(norms, 1e-300)[:, None], 0.0)
    return normals, areas


def signed_volume(vertices, faces):
    """Signed volume via the divergence theorem; positive for outward orientation."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def mesh_edges(faces):
    """(E, 2) unique undirected edges and the (3F,) directed edge list."""
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    edges = np.unique(und, axis=0)
    return edges, directed


def is_edge_manifold_closed(faces):
    """True iff every undirected edge is shared by exactly two faces."""
    _, directed = mesh_edges(faces)
    und = np.sort(directed, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def is_consistently_oriented(faces):
    """True iff every undirected edge appears once in each direction."""
    _, directed = mesh_edges(faces)
    keys = directed[:, 0].astype(np.int64) * (directed.max() + 1) + directed[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    # each directed edge must be unique, and the reverse must exist
    if np.any(counts != 1):
        return False
    rev = directed[:, 1].astype(np.int64) * (directed.max() + 1) + directed[:, 0]
    return bool(np.isin(keys, rev).all())


def euler_characteristic(vertices, faces):
    edges, _ = mesh_edges(faces)
    used = np.unique(faces)
    return int(used.size - edges.shape[0] + faces.shape[0])


def connected_face_components(n_vertices, faces):
    """Number of connected components over the vertex graph of the mesh."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    edges, _ = mesh_edges(faces)
    used = np.unique(faces)
    data = np.ones(edges.shape[0])
    adj = coo_matrix((data, (edges[:, 0], edges[:, 1])), shape=(n_vertices, n_vertices))
    n, labels = connected_components(adj + adj.T, directed=False)
    # ignore isolated (unreferenced) vertices
    return int(np.unique(labels[used]).size), labels


def solid_angles(vertices, faces, points):
    """Signed solid angle of every face as seen from every point.

    Returns an (N, F) array; uses the van Oosterom-Strackee formula, which is
    robust for all triangle/point configurations not on the surface itself.
    """
    tri = vertices[faces]  # (F, 3, 3)
    r = tri[None, :, :, :] - points[:, None, None, :]  # (N, F, 3, 3)
    norms = np.linalg.norm(r, axis=3)  # (N, F, 3)
    r0, r1, r2 = r[:, :, 0], r[:, :, 1], r[:, :, 2]
    n0, n1, n2 = norms[:, :, 0], norms[:, :, 1], norms[:, :, 2]
    num = np.einsum("nfi,nfi->nf", r0, np.cross(r1, r2))
    den = (
        n0 * n1 * n2
        + np.einsum("nfi,nfi->nf", r0, r1) * n2
        + np.einsum("nfi,nfi->nf", r0, r2) * n1
        + np.einsum("nfi,nfi->nf", r1, r2) * n0
    )
    return 2.0 * np.arctan2(num, den)


def winding_numbers(vertices, faces, points, chunk=512):
    """Generalized winding number of each point; ~1 inside, ~0 outside."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        block = points[s : s + chunk]
        out[s : s + chunk] = solid_angles(vertices, faces, block).sum(axis=1) / (4.0 * np.pi)
    return out


def point_triangle_distances(points, vertices, faces, chunk=256):
    """Min distance from each point to the mesh surface. (N,) array."""
    tri = vertices[faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    points = np.atleast_2d(points)
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        p = points[s : s + chunk][:, None, :]  # (n, 1, 3)
        d2 = _point_tri_sqdist(p, a[None], b[None], c[None])
        out[s : s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def _point_tri_sqdist(p, a, b, c):
    """Squared distance point-to-triangle, Ericson's region method, vectorized."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    eps = 1e-300
    # interior solution
    denom = np.maximum(va + vb + vc, eps)
    v = vb / denom
    w = vc / denom
    proj = a + v[..., None] * ab + w[..., None] * ac

    # vertex regions
    proj = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, proj)
    proj = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, proj)
    proj = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, proj)

    # edge AB
    t_ab = d1 / np.where(d1 - d3 != 0, d1 - d3, eps)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    proj = np.where(on_ab[..., None], a + np.clip(t_ab, 0, 1)[..., None] * ab, proj)
    # edge AC
    t_ac = d2 / np.where(d2 - d6 != 0, d2 - d6, eps)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    proj = np.where(on_ac[..., None], a + np.clip(t_ac, 0, 1)[..., None] * ac, proj)
    # edge BC
    t_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) + (d5 - d6), eps)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    proj = np.where(on_bc[..., None], b + np.clip(t_bc, 0, 1)[..., None] * (c - b), proj)

    diff = p - proj
    return np.einsum("...i,...i->...", diff, diff)


def bbox_diagonal(points):
    p = np.asarray(points)
    return float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))


# ---------------------------------------------------------------------------
# procedural meshes used by fixtures, benchmarks and the test suite


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Subdivided icosahedron: 12 -> 42 -> 162 -> 642 ... vertices."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts, faces = _subdivide_once(verts, faces)
        verts /= np.linalg.norm(verts, axis=1)[:, None]
    verts = verts * radius + np.asarray(center, dtype=np.float64)
    return verts, faces


def _subdivide_once(verts, faces):
    cache = {}
    verts = list(map(tuple, verts))

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            v = (np.array(verts[i]) + np.array(verts[j])) / 2.0
            verts.append(tuple(v))
            cache[key] = len(verts) - 1
        return cache[key]

    new_faces = []
    for a, b, c in faces:
        ab = midpoint(a, b)
        bc = midpoint(b, c)
        ca = midpoint(c, a)
        new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts, dtype=np.float64), np.array(new_faces, dtype=np.int64)


def sample_mesh_surface(vertices, faces, n, rng):
    """Area-weighted surface samples with normals. Returns (points, normals)."""
    normals, areas = face_normals_areas(vertices, faces)
    probs = areas / areas.sum()
    idx = rng.choice(len(faces), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    tri = vertices[faces[idx]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, normals[idx]
