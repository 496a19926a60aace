"""Automatic cage construction around a splat cloud.

Pipeline: unsigned distance grid from the splat centroids -> marching cubes
at an offset iso-level -> largest component -> quadric edge-collapse
decimation down to a vertex budget, preserving a closed manifold throughout.
"""

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInput, EmptyLevelSet, NonManifoldOutput, ResolutionOutOfRange
from .geometry import (
    bbox_diagonal,
    connected_face_components,
    face_normals_areas,
    is_consistently_oriented,
    is_edge_manifold_closed,
    signed_volume,
    winding_numbers,
)

DECIMATION_FLOOR = 8  # collapses never reduce a cage below this many vertices
DEFAULT_RESOLUTION = 96
DEFAULT_OFFSET_CELLS = 4.0
DEFAULT_TARGET_VERTICES = 500


@dataclass
class CageMesh:
    """Closed, outward-oriented manifold triangle mesh enclosing the scene."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.face_normals, self.face_areas = face_normals_areas(self.vertices, self.faces)

    @property
    def n_vertices(self):
        return int(self.vertices.shape[0])

    @property
    def n_faces(self):
        return int(self.faces.shape[0])

    def validate(self):
        if not is_edge_manifold_closed(self.faces):
            raise NonManifoldOutput("cage is not a closed 2-manifold")
        if not is_consistently_oriented(self.faces):
            raise NonManifoldOutput("cage faces are inconsistently oriented")
        if signed_volume(self.vertices, self.faces) <= 0:
            raise NonManifoldOutput("cage is oriented inward (negative volume)")
        diag = bbox_diagonal(self.vertices)
        if np.any(self.face_areas <= 1e-10 * diag * diag):
            raise NonManifoldOutput("cage contains degenerate faces")
        return self

    def contains(self, points, threshold=0.5):
        return winding_numbers(self.vertices, self.faces, points) > threshold

    def deformed(self, new_vertices) -> "DeformedCage":
        return DeformedCage(rest=self, vertices=np.asarray(new_vertices, dtype=np.float64))


@dataclass
class DeformedCage:
    """Vertex positions for a cage in a deformed state; connectivity shared."""

    rest: CageMesh
    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.shape != self.rest.vertices.shape:
            from .errors import ConnectivityMismatch

            raise ConnectivityMismatch(
                f"deformed vertices {self.vertices.shape} != rest {self.rest.vertices.shape}"
            )

    @property
    def faces(self):
        return self.rest.faces

    def face_normals(self):
        normals, _ = face_normals_areas(self.vertices, self.rest.faces)
        return normals

    def flipped_faces(self):
        """Faces whose deformed normal points against the rest normal."""
        normals = self.face_normals()
        return np.einsum("ij,ij->i", normals, self.rest.face_normals) < 0.0


@dataclass
class DistanceGrid:
    values: np.ndarray   # (R, R, R)
    origin: np.ndarray   # (3,)
    spacing: np.ndarray  # (3,) cell size per axis

    @property
    def cell_diag(self):
        return float(np.linalg.norm(self.spacing))


def sdf_grid(points, resolution=DEFAULT_RESOLUTION, padding=0.15, bounds=None) -> DistanceGrid:
    """Unsigned distance field to a point set, sampled on a regular grid.

    Grid nodes include the bounds corners (linspace over each axis). When
    `bounds` is omitted it is derived from the points, padded by `padding`
    times the extent per side; that derivation requires >= 4 non-coplanar
    points.
    """
    points = np.asarray(points, dtype=np.float64)
    if not (16 <= resolution <= 512):
        raise ResolutionOutOfRange(f"resolution {resolution} outside [16, 512]")
    if bounds is None:
        if points.shape[0] < 4:
            raise DegenerateInput(f"need >= 4 points to derive bounds, got {points.shape[0]}")
        centered = points - points.mean(axis=0)
        svals = np.linalg.svd(centered, compute_uv=False)
        if svals[2] < 1e-9 * max(svals[0], 1e-300):
            raise DegenerateInput("points are (nearly) coplanar")
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        pad = padding * (hi - lo)
        lo, hi = lo - pad, hi + pad
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)

    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    tree = cKDTree(points)
    dist, _ = tree.query(nodes, k=1, workers=-1)
    spacing = (hi - lo) / (resolution - 1)
    return DistanceGrid(values=dist.reshape(resolution, resolution, resolution), origin=lo, spacing=spacing)


def extract_cage(grid: DistanceGrid, offset, target_vertices=DEFAULT_TARGET_VERTICES) -> CageMesh:
    """Iso-surface the distance grid at `offset` and decimate to a budget."""
    from skimage import measure

    cell = float(grid.spacing.max())
    if offset <= 2.0 * cell:
        raise ValueError(f"offset {offset} must exceed two cells ({2 * cell:.4g}) to enclose the points")
    if offset <= grid.values.min():
        raise EmptyLevelSet(f"iso-level {offset} below all grid values (level set is empty or unbounded)")
    if offset >= grid.values.max():
        raise EmptyLevelSet(f"iso-level {offset} exceeds all grid values")
    # one layer of above-level cells guarantees the surface closes inside the
    # volume even where the offset shell would poke out of the padded box
    big = float(grid.values.max()) + offset + 1.0
    values = np.pad(grid.values, 1, constant_values=big)
    try:
        verts, faces, _, _ = measure.marching_cubes(values, level=offset, spacing=tuple(grid.spacing))
    except (ValueError, RuntimeError) as e:
        raise EmptyLevelSet(str(e))
    verts = verts + (grid.origin - grid.spacing)
    faces = faces.astype(np.int64)

    faces = _largest_component(verts, faces)
    verts, faces = _compact(verts, faces)
    if signed_volume(verts, faces) < 0:
        faces = faces[:, ::-1]

    target = max(int(target_vertices), DECIMATION_FLOOR)
    verts, faces = decimate(verts, faces, target)
    mesh = CageMesh(verts, faces)
    return mesh.validate()


def cage_resolution_sweep(points, target_vertex_budgets, resolution=DEFAULT_RESOLUTION,
                          offset_cells=DEFAULT_OFFSET_CELLS, padding=0.15):
    """One cage per requested vertex budget, sharing a single distance grid."""
    budgets = list(target_vertex_budgets)
    if not budgets:
        return []
    grid = sdf_grid(points, resolution=resolution, padding=padding)
    offset = offset_cells * float(grid.spacing.max())
    return [extract_cage(grid, offset, target_vertices=b) for b in budgets]


def build_cage(points, resolution=DEFAULT_RESOLUTION, offset_cells=DEFAULT_OFFSET_CELLS,
               target_vertices=DEFAULT_TARGET_VERTICES, padding=0.15) -> CageMesh:
    """Convenience wrapper: grid -> offset surface -> decimated cage."""
    grid = sdf_grid(points, resolution=resolution, padding=padding)
    offset = offset_cells * float(grid.spacing.max())
    return extract_cage(grid, offset, target_vertices=target_vertices)


def _largest_component(verts, faces):
    n_comp, labels = connected_face_components(verts.shape[0], faces)
    if n_comp <= 1:
        return faces
    face_labels = labels[faces[:, 0]]
    uniq, counts = np.unique(face_labels, return_counts=True)
    keep = uniq[np.argmax(counts)]
    return faces[face_labels == keep]


def _compact(verts, faces):
    """Drop unreferenced vertices and reindex faces."""
    used = np.unique(faces)
    remap = -np.ones(verts.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.size)
    return verts[used], remap[faces]


# ---------------------------------------------------------------------------
# quadric edge-collapse decimation (Garland-Heckbert), manifold-preserving


def decimate(verts, faces, target_vertices):
    """Collapse edges by quadric error until the vertex budget is met.

    Only collapses that keep the mesh a closed, consistently oriented
    manifold are applied (link condition + normal-flip rejection). The
    result may exceed the target when no further valid collapse exists.
    """
    target_vertices = max(int(target_vertices), DECIMATION_FLOOR)
    dec = _Decimator(verts, faces)
    dec.run(target_vertices)
    return dec.extract()


class _Decimator:
    def __init__(self, verts, faces):
        self.v = [np.array(p, dtype=np.float64) for p in verts]
        self.alive_v = [True] * len(self.v)
        self.faces = [tuple(int(i) for i in f) for f in faces]
        self.alive_f = [True] * len(self.faces)
        self.vf = [set() for _ in self.v]  # vertex -> incident face ids
        for fi, f in enumerate(self.faces):
            for vi in f:
                self.vf[vi].add(fi)
        self.quadrics = [np.zeros((4, 4)) for _ in self.v]
        for fi, f in enumerate(self.faces):
            q = self._face_quadric(fi)
            for vi in f:
                self.quadrics[vi] += q
        self.n_alive = len(self.v)
        self.heap = []
        self.stamp = [0] * len(self.v)  # invalidates stale heap entries
        self.counter = 0
        for e in self._edges():
            self._push(e)

    def _face_quadric(self, fi):
        a, b, c = (self.v[i] for i in self.faces[fi])
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-300:
            return np.zeros((4, 4))
        area = 0.5 * norm
        n = n / norm
        d = -np.dot(n, a)
        plane = np.append(n, d)
        return area * np.outer(plane, plane)

    def _edges(self):
        seen = set()
        for fi, f in enumerate(self.faces):
            if not self.alive_f[fi]:
                continue
            for k in range(3):
                e = (min(f[k], f[(k + 1) % 3]), max(f[k], f[(k + 1) % 3]))
                if e not in seen:
                    seen.add(e)
                    yield e
        return

    def _optimal_point(self, q, a, b):
        m = q.copy()
        m[3] = [0.0, 0.0, 0.0, 1.0]
        try:
            x = np.linalg.solve(m, np.array([0.0, 0.0, 0.0, 1.0]))
            if np.all(np.isfinite(x)) and abs(x[3]) > 1e-12:
                return x[:3] / x[3]
        except np.linalg.LinAlgError:
            pass
        # fall back to the best of endpoints and midpoint
        cands = [a, b, 0.5 * (a + b)]
        costs = [self._cost_at(q, p) for p in cands]
        return cands[int(np.argmin(costs))]

    @staticmethod
    def _cost_at(q, p):
        ph = np.append(p, 1.0)
        return float(ph @ q @ ph)

    def _push(self, edge):
        i, j = edge
        if not (self.alive_v[i] and self.alive_v[j]):
            return
        q = self.quadrics[i] + self.quadrics[j]
        p = self._optimal_point(q, self.v[i], self.v[j])
        cost = self._cost_at(q, p)
        self.counter += 1
        heapq.heappush(self.heap, (cost, self.counter, i, j, self.stamp[i], self.stamp[j], p))

    def _neighbors(self, i):
        out = set()
        for fi in self.vf[i]:
            out.update(self.faces[fi])
        out.discard(i)
        return out

    def _link_ok(self, i, j):
        # shared vertex neighborhood must be exactly the two face-opposite vertices
        shared_faces = self.vf[i] & self.vf[j]
        if len(shared_faces) != 2:
            return False
        opposite = set()
        for fi in shared_faces:
            opposite.update(v for v in self.faces[fi] if v not in (i, j))
        common = self._neighbors(i) & self._neighbors(j)
        return common == opposite

    def _would_flip(self, i, j, p):
        """Any surviving face around i or j whose normal inverts at p."""
        for vi in (i, j):
            for fi in self.vf[vi]:
                f = self.faces[fi]
                if i in f and j in f:
                    continue  # face disappears
                before = [self.v[k] for k in f]
                after = [p if k in (i, j) else self.v[k] for k in f]
                n0 = np.cross(before[1] - before[0], before[2] - before[0])
                n1 = np.cross(after[1] - after[0], after[2] - after[0])
                n1n = np.linalg.norm(n1)
                if n1n < 1e-14:
                    return True
                if np.dot(n0, n1) <= 1e-10 * np.linalg.norm(n0) * n1n:
                    return True
        return False

    def run(self, target):
        while self.n_alive > target and self.heap:
            cost, _, i, j, si, sj, p = heapq.heappop(self.heap)
            if not (self.alive_v[i] and self.alive_v[j]):
                continue
            if si != self.stamp[i] or sj != self.stamp[j]:
                continue
            if self.n_alive - 1 < DECIMATION_FLOOR:
                break
            if not self._link_ok(i, j):
                continue
            if self._would_flip(i, j, p):
                continue
            self._collapse(i, j, p)

    def _collapse(self, i, j, p):
        """Merge j into i, moving i to p."""
        self.v[i] = p
        self.quadrics[i] = self.quadrics[i] + self.quadrics[j]
        dead = self.vf[i] & self.vf[j]
        for fi in dead:
            self.alive_f[fi] = False
            for vk in self.faces[fi]:
                self.vf[vk].discard(fi)
        for fi in list(self.vf[j]):
            f = self.faces[fi]
            self.faces[fi] = tuple(i if v == j else v for v in f)
            self.vf[j].discard(fi)
            self.vf[i].add(fi)
        self.alive_v[j] = False
        self.n_alive -= 1
        self.stamp[i] += 1
        # requeue the edges around the merged vertex
        for nb in self._neighbors(i):
            self._push((min(i, nb), max(i, nb)))

    def extract(self):
        verts = np.array([p for p, alive in zip(self.v, self.alive_v) if alive])
        remap = -np.ones(len(self.v), dtype=np.int64)
        remap[[k for k, alive in enumerate(self.alive_v) if alive]] = np.arange(len(verts))
        faces = np.array([remap[list(f)] for fi, f in enumerate(self.faces) if self.alive_f[fi]], dtype=np.int64)
        return verts, faces


# ---------------------------------------------------------------------------
# OBJ import/export (triangles only)


def save_obj(mesh, path):
    verts = mesh.vertices if hasattr(mesh, "vertices") else mesh[0]
    faces = mesh.faces if hasattr(mesh, "faces") else mesh[1]
    with open(path, "w") as f:
        f.write("# cage mesh\n")
        for v in verts:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for tri in faces:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def load_obj(path) -> CageMesh:
    verts = []
    faces = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangle faces are supported")
                faces.append(idx)
    return CageMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))
