"""Per-face transform field -> cage vertices through a Poisson solve.

The cage deformation is parameterized by a rotation (6-DoF two-column form)
and a symmetric stretch (6 free entries) per face. Multiplying out gives a
target 3x3 transform per face; the deformed vertex positions minimize the
area-weighted squared distance between the per-face deformation gradients
and those targets. The minimizer solves one sparse SPD system whose
factorization is built once per cage and reused every iteration, both for
the forward solve and for the adjoint (the system is symmetric).

Per-face gradients only see in-plane variation, so the reported Jacobian of
face i is completed with the rest normal outer product:

    J_i(V') = (G_i V')^T + n_i n_i^T,    J_i(V_rest) = I exactly.

The completion term is constant in V' and therefore changes neither the
minimizer nor the adjoint; it makes rest Jacobians the identity, which is
what the transform targets are expressed against.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csc_matrix, csr_matrix
from scipy.sparse.linalg import splu

from .cage import CageMesh, DeformedCage
from .errors import DegenerateRotation, SingularSystem, SolveFailure
from .geometry import connected_face_components

_SYM_IDX = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]

IDENTITY_ROT6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
IDENTITY_STRETCH6 = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


@dataclass
class JacobianParams:
    """Optimization variables: per-face 6-DoF rotation + 6-DoF symmetric stretch."""

    rot6: np.ndarray      # (F, 6) two stacked 3-vectors, orthonormalized column-wise
    stretch6: np.ndarray  # (F, 6) diagonal then off-diagonal xy, xz, yz

    def __post_init__(self):
        self.rot6 = np.asarray(self.rot6, dtype=np.float64)
        self.stretch6 = np.asarray(self.stretch6, dtype=np.float64)
        if self.rot6.shape != self.stretch6.shape or self.rot6.shape[1] != 6:
            raise ValueError("rot6 and stretch6 must both be (F, 6)")

    @property
    def n_faces(self):
        return self.rot6.shape[0]

    @staticmethod
    def identity(n_faces) -> "JacobianParams":
        return JacobianParams(
            rot6=np.tile(IDENTITY_ROT6, (n_faces, 1)),
            stretch6=np.tile(IDENTITY_STRETCH6, (n_faces, 1)),
        )

    def copy(self):
        return JacobianParams(self.rot6.copy(), self.stretch6.copy())


def stretch6_to_matrix(stretch6):
    s = np.zeros(stretch6.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(_SYM_IDX):
        s[..., i, j] = stretch6[..., k]
        s[..., j, i] = stretch6[..., k]
    return s


def matrix_to_stretch6(s):
    return np.stack([s[..., i, j] for (i, j) in _SYM_IDX], axis=-1)


def rot6_to_matrix(rot6, eps=1e-8):
    """Gram-Schmidt the two 3-vectors into the first two columns of R."""
    a1 = rot6[..., :3]
    a2 = rot6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= eps):
        raise DegenerateRotation("first rotation vector has near-zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= eps):
        raise DegenerateRotation("rotation vectors are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)  # columns


def matrix_to_rot6(r):
    """First two columns stacked; inverse of rot6_to_matrix on SO(3)."""
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def params_to_transforms(params: JacobianParams):
    """T_i = R(rot6_i) S(stretch6_i). (F, 3, 3)."""
    r = rot6_to_matrix(params.rot6)
    s = stretch6_to_matrix(params.stretch6)
    return r @ s


def params_to_transforms_adjoint(params: JacobianParams, grad_t):
    """Backward of params_to_transforms: dL/dT -> (dL/drot6, dL/dstretch6)."""
    grad_t = np.asarray(grad_t, dtype=np.float64)
    r = rot6_to_matrix(params.rot6)
    s = stretch6_to_matrix(params.stretch6)
    grad_r = grad_t @ s.transpose(0, 2, 1)  # d(RS)/dR
    grad_s = r.transpose(0, 2, 1) @ grad_t  # d(RS)/dS
    # symmetric parameterization: off-diagonals feed two matrix entries
    grad_stretch6 = np.stack(
        [grad_s[..., i, j] + (grad_s[..., j, i] if i != j else 0.0) for (i, j) in _SYM_IDX],
        axis=-1,
    )
    grad_rot6 = _rot6_backward(params.rot6, grad_r)
    return grad_rot6, grad_stretch6


def _rot6_backward(rot6, grad_r):
    """Backward through the Gram-Schmidt orthonormalization."""
    a1 = rot6[..., :3]
    a2 = rot6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    b2 = u2 / n2

    g1 = grad_r[..., :, 0]
    g2 = grad_r[..., :, 1]
    g3 = grad_r[..., :, 2]

    # b3 = b1 x b2
    gb1 = g1 + np.cross(b2, g3)
    gb2 = g2 + np.cross(g3, b1)

    # b2 = u2 / |u2|
    gu2 = (gb2 - np.sum(gb2 * b2, axis=-1, keepdims=True) * b2) / n2
    # u2 = a2 - (b1 . a2) b1
    ga2 = gu2 - np.sum(gu2 * b1, axis=-1, keepdims=True) * b1
    gb1 = gb1 - np.sum(b1 * a2, axis=-1, keepdims=True) * gu2 - np.sum(gu2 * b1, axis=-1, keepdims=True) * a2
    # b1 = a1 / |a1|
    ga1 = (gb1 - np.sum(gb1 * b1, axis=-1, keepdims=True) * b1) / n1
    return np.concatenate([ga1, ga2], axis=-1)


# ---------------------------------------------------------------------------
# Poisson system


class PoissonSystem:
    """Prefactored least-squares system for a fixed rest cage."""

    def __init__(self, cage: CageMesh):
        n_comp, _ = connected_face_components(cage.n_vertices, cage.faces)
        if n_comp != 1:
            raise SingularSystem(f"cage has {n_comp} connected components")
        self.cage = cage
        v, f = cage.vertices, cage.faces
        nf, nv = cage.n_faces, cage.n_vertices
        normals, areas = cage.face_normals, cage.face_areas

        # in-plane hat-function gradients -> sparse (3F, V) operator
        rows = np.empty(9 * nf, dtype=np.int64)
        cols = np.empty(9 * nf, dtype=np.int64)
        vals = np.empty(9 * nf)
        for j in range(3):
            e = v[f[:, (j + 2) % 3]] - v[f[:, (j + 1) % 3]]
            g = np.cross(normals, e) / (2.0 * areas)[:, None]
            for k in range(3):
                idx = slice((3 * j + k) * nf, (3 * j + k + 1) * nf)
                rows[idx] = 3 * np.arange(nf) + k
                cols[idx] = f[:, j]
                vals[idx] = g[:, k]
        self.grad_op = csr_matrix((vals, (rows, cols)), shape=(3 * nf, nv))
        self.face_area_weights = np.repeat(areas, 3)
        self.rest_jacobians = self.face_jacobians(v)

        weighted = self.grad_op.multiply(self.face_area_weights[:, None]).tocsr()
        lap = (self.grad_op.T @ weighted).tocoo()

        # mean-anchoring via a symmetric KKT bordering row/column of ones
        rows = np.concatenate([lap.row, np.full(nv, nv), np.arange(nv)])
        cols = np.concatenate([lap.col, np.arange(nv), np.full(nv, nv)])
        vals = np.concatenate([lap.data, np.ones(nv), np.ones(nv)])
        kkt = csc_matrix((vals, (rows, cols)), shape=(nv + 1, nv + 1))
        try:
            self._lu = splu(kkt)
        except RuntimeError as e:
            raise SingularSystem(str(e))
        self._kkt = kkt
        self._weighted_grad = weighted
        self.rest_mean = v.mean(axis=0)

    @property
    def n_faces(self):
        return self.cage.n_faces

    def face_jacobians(self, vertices):
        """(F, 3, 3) deformation gradients incl. the rest-normal completion."""
        b = (self.grad_op @ vertices).reshape(self.n_faces, 3, 3)
        n = self.cage.face_normals
        return b.transpose(0, 2, 1) + n[:, :, None] * n[:, None, :]

    def solve(self, rhs, constraint):
        """Solve the bordered system for one right-hand side per column."""
        nv = self.cage.n_vertices
        full = np.vstack([rhs, constraint[None, :]])
        sol = np.column_stack([self._lu.solve(full[:, c]) for c in range(3)])
        x = sol[:nv]
        residual = np.abs(self._kkt @ sol - full).max() / max(np.abs(full).max(), 1e-300)
        if not np.isfinite(x).all() or residual > 1e-8:
            raise SolveFailure(f"factorization residual {residual:.3e}")
        return x

    def factorization_residual(self, rhs=None):
        """Relative residual of a probe solve; < 1e-10 for a healthy system."""
        nv = self.cage.n_vertices
        if rhs is None:
            rng = np.random.default_rng(0)
            rhs = rng.normal(size=(nv + 1, 1))
        sol = np.column_stack([self._lu.solve(rhs[:, c]) for c in range(rhs.shape[1])])
        return float(np.abs(self._kkt @ sol - rhs).max() / np.abs(rhs).max())


def build_poisson(cage: CageMesh) -> PoissonSystem:
    return PoissonSystem(cage)


def _inplane_targets(system: PoissonSystem, transforms):
    """(3F, 3) stacked (T_i - n n^T)^T blocks the gradient operator can reach."""
    n = system.cage.face_normals
    t = transforms - n[:, :, None] * n[:, None, :]
    return t.transpose(0, 2, 1).reshape(3 * system.n_faces, 3)


def solve_cage(system: PoissonSystem, transforms, source_jacobians=None) -> DeformedCage:
    """Vertices whose face Jacobians best match T_i J0_i, mean anchored at rest."""
    transforms = np.asarray(transforms, dtype=np.float64)
    if transforms.shape != (system.n_faces, 3, 3):
        raise ValueError(f"expected ({system.n_faces}, 3, 3) transforms, got {transforms.shape}")
    targets = transforms if source_jacobians is None else transforms @ source_jacobians
    rhs = system.grad_op.T @ (system.face_area_weights[:, None] * _inplane_targets(system, targets))
    x = system.solve(rhs, system.cage.n_vertices * system.rest_mean)
    return DeformedCage(rest=system.cage, vertices=x)


def solve_cage_adjoint(system: PoissonSystem, transforms, upstream_grad):
    """dL/dT_i given dL/dvertices; reuses the forward factorization."""
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (system.cage.n_vertices, 3):
        raise ValueError("upstream gradient must be (V, 3)")
    w = system.solve(upstream_grad, np.zeros(3))
    gm = system.face_area_weights[:, None] * (system.grad_op @ w)  # (3F, 3)
    return gm.reshape(system.n_faces, 3, 3).transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# parameterizations for the optimizer and the ablation harness


class DecomposedParameterization:
    """Rotation + stretch per face; the default."""

    name = "decomposed"

    def __init__(self, system: PoissonSystem):
        self.system = system

    def initial(self):
        p = JacobianParams.identity(self.system.n_faces)
        return [p.rot6, p.stretch6]

    def forward(self, arrays):
        params = JacobianParams(arrays[0], arrays[1])
        return solve_cage(self.system, params_to_transforms(params))

    def adjoint(self, arrays, vertex_grad):
        params = JacobianParams(arrays[0], arrays[1])
        grad_t = solve_cage_adjoint(self.system, None, vertex_grad)
        grad_rot6, grad_stretch6 = params_to_transforms_adjoint(params, grad_t)
        return [grad_rot6, grad_stretch6]


class RawJacobianParameterization:
    """Unconstrained 9 entries per face."""

    name = "jacobian"

    def __init__(self, system: PoissonSystem):
        self.system = system

    def initial(self):
        return [np.tile(np.eye(3).reshape(9), (self.system.n_faces, 1))]

    def forward(self, arrays):
        return solve_cage(self.system, arrays[0].reshape(-1, 3, 3))

    def adjoint(self, arrays, vertex_grad):
        grad_t = solve_cage_adjoint(self.system, None, vertex_grad)
        return [grad_t.reshape(-1, 9)]


class DirectVertexParameterization:
    """Cage vertex offsets optimized directly; no Poisson regularization."""

    name = "vertices"

    def __init__(self, system: PoissonSystem):
        self.system = system

    def initial(self):
        return [np.zeros_like(self.system.cage.vertices)]

    def forward(self, arrays):
        return DeformedCage(rest=self.system.cage, vertices=self.system.cage.vertices + arrays[0])

    def adjoint(self, arrays, vertex_grad):
        return [vertex_grad]


PARAMETERIZATIONS = {
    "decomposed": DecomposedParameterization,
    "jacobian": RawJacobianParameterization,
    "vertices": DirectVertexParameterization,
}


# ---------------------------------------------------------------------------
# checkpoint file: header + per-face float64 rot6 / stretch6

_CKPT_MAGIC = b"SCJP"
_CKPT_VERSION = 1


def save_params(params: JacobianParams, path):
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQ", _CKPT_VERSION, params.n_faces))
        f.write(np.ascontiguousarray(params.rot6, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(params.stretch6, dtype="<f8").tobytes())


def load_params(path) -> JacobianParams:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError("not a params checkpoint")
        version, n = struct.unpack("<IQ", f.read(12))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        rot6 = np.frombuffer(f.read(8 * 6 * n), dtype="<f8").reshape(n, 6).copy()
        stretch6 = np.frombuffer(f.read(8 * 6 * n), dtype="<f8").reshape(n, 6).copy()
    return JacobianParams(rot6, stretch6)
