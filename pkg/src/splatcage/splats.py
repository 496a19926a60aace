"""Gaussian-splat data model, covariance algebra, and 3DGS-style PLY files.

A cloud is stored struct-of-arrays. The raw on-disk encodings (log scales,
logit opacities, unnormalized quaternions, float32) are kept verbatim so an
unmodified cloud round-trips through save_ply byte-for-byte; all derived
quantities (scale, opacity, normalized rotation) are float64 views computed
at load time.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, MalformedHeader, MissingField, NormalizationFailure, NotSPD

REQUIRED_PROPS = [
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
]

_QUAT_NORM_TOL = 1e-6
_SPD_SYM_TOL = 1e-8


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(y):
    y = np.asarray(y, dtype=np.float64)
    y = np.clip(y, 1e-12, 1.0 - 1e-12)
    return np.log(y) - np.log1p(-y)


@dataclass
class Splat:
    """Single-Gaussian view into a cloud (copies, does not alias)."""

    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray  # unit quaternion, (w, x, y, z)
    opacity: float
    color: np.ndarray  # degree-0 SH coefficient


@dataclass
class SplatCloud:
    """Ordered collection of Gaussians plus opaque extra PLY properties.

    Immutable by convention: deformation produces a new cloud.
    """

    mu: np.ndarray          # (N, 3) float64
    scale: np.ndarray       # (N, 3) float64, strictly positive
    rot: np.ndarray         # (N, 4) float64 unit quaternions (w, x, y, z)
    opacity: np.ndarray     # (N,) float64 in [0, 1]
    color: np.ndarray       # (N, 3) float64 f_dc coefficients
    extra_names: list = field(default_factory=list)
    extra: np.ndarray | None = None  # (N, K) float32 passthrough (e.g. f_rest_*)
    # original float32 table + property order, present only on loaded clouds;
    # lets save_ply round-trip a file bit-for-bit despite the float64 views
    raw_table: np.ndarray | None = None
    raw_props: list | None = None

    @property
    def count(self):
        return int(self.mu.shape[0])

    def __len__(self):
        return self.count

    def __getitem__(self, i) -> Splat:
        return Splat(
            mu=self.mu[i].copy(),
            scale=self.scale[i].copy(),
            rot=self.rot[i].copy(),
            opacity=float(self.opacity[i]),
            color=self.color[i].copy(),
        )

    def validate(self):
        if self.count == 0:
            raise EmptyCloud("cloud has no splats")
        if np.any(self.scale <= 0):
            raise ValueError("scales must be strictly positive")
        norms = np.linalg.norm(self.rot, axis=1)
        if np.any(np.abs(norms - 1.0) > _QUAT_NORM_TOL):
            raise NormalizationFailure("quaternions not normalized")
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise ValueError("opacities must lie in [0, 1]")
        return self

    @staticmethod
    def from_arrays(mu, scale, rot, opacity, color):
        mu = np.asarray(mu, dtype=np.float64)
        n = mu.shape[0]
        rot = np.asarray(rot, dtype=np.float64)
        norms = np.linalg.norm(rot, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise NormalizationFailure("zero quaternion cannot be normalized")
        return SplatCloud(
            mu=mu,
            scale=np.asarray(scale, dtype=np.float64).reshape(n, 3),
            rot=rot / norms,
            opacity=np.asarray(opacity, dtype=np.float64).reshape(n),
            color=np.asarray(color, dtype=np.float64).reshape(n, 3),
        ).validate()


# ---------------------------------------------------------------------------
# covariance algebra


def quat_to_matrix(q):
    """Unit quaternion(s) (w, x, y, z) -> rotation matrix. (..., 4) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Rotation matrix -> unit quaternion (w, x, y, z), Shepperd's method."""
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 2
    if single:
        m = m[None]
    t = np.einsum("...ii->...", m)
    q = np.empty(m.shape[:-2] + (4,))

    c0 = t > 0
    c1 = (~c0) & (m[..., 0, 0] >= m[..., 1, 1]) & (m[..., 0, 0] >= m[..., 2, 2])
    c2 = (~c0) & (~c1) & (m[..., 1, 1] >= m[..., 2, 2])
    c3 = ~(c0 | c1 | c2)

    s = np.sqrt(np.where(c0, t + 1.0, 1.0)) * 2.0
    q[..., 0] = np.where(c0, 0.25 * s, 0.0)
    q[..., 1] = np.where(c0, (m[..., 2, 1] - m[..., 1, 2]) / s, 0.0)
    q[..., 2] = np.where(c0, (m[..., 0, 2] - m[..., 2, 0]) / s, 0.0)
    q[..., 3] = np.where(c0, (m[..., 1, 0] - m[..., 0, 1]) / s, 0.0)

    s1 = np.sqrt(np.maximum(1.0 + m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2], 0.0)) * 2.0
    s1 = np.where(s1 == 0, 1.0, s1)
    q[..., 0] = np.where(c1, (m[..., 2, 1] - m[..., 1, 2]) / s1, q[..., 0])
    q[..., 1] = np.where(c1, 0.25 * s1, q[..., 1])
    q[..., 2] = np.where(c1, (m[..., 0, 1] + m[..., 1, 0]) / s1, q[..., 2])
    q[..., 3] = np.where(c1, (m[..., 0, 2] + m[..., 2, 0]) / s1, q[..., 3])

    s2 = np.sqrt(np.maximum(1.0 + m[..., 1, 1] - m[..., 0, 0] - m[..., 2, 2], 0.0)) * 2.0
    s2 = np.where(s2 == 0, 1.0, s2)
    q[..., 0] = np.where(c2, (m[..., 0, 2] - m[..., 2, 0]) / s2, q[..., 0])
    q[..., 1] = np.where(c2, (m[..., 0, 1] + m[..., 1, 0]) / s2, q[..., 1])
    q[..., 2] = np.where(c2, 0.25 * s2, q[..., 2])
    q[..., 3] = np.where(c2, (m[..., 1, 2] + m[..., 2, 1]) / s2, q[..., 3])

    s3 = np.sqrt(np.maximum(1.0 + m[..., 2, 2] - m[..., 0, 0] - m[..., 1, 1], 0.0)) * 2.0
    s3 = np.where(s3 == 0, 1.0, s3)
    q[..., 0] = np.where(c3, (m[..., 1, 0] - m[..., 0, 1]) / s3, q[..., 0])
    q[..., 1] = np.where(c3, (m[..., 0, 2] + m[..., 2, 0]) / s3, q[..., 1])
    q[..., 2] = np.where(c3, (m[..., 1, 2] + m[..., 2, 1]) / s3, q[..., 2])
    q[..., 3] = np.where(c3, 0.25 * s3, q[..., 3])

    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    # canonical sign: non-negative w
    q = np.where(q[..., :1] < 0, -q, q)
    return q[0] if single else q


def covariance(splat_or_rot, scale=None):
    """Sigma = R diag(scale^2) R^T. Accepts a Splat or (rot, scale) arrays."""
    if scale is None:
        rot, scale = splat_or_rot.rot, splat_or_rot.scale
    else:
        rot = splat_or_rot
    r = quat_to_matrix(rot)
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    return np.einsum("...ij,...j,...kj->...ik", r, s2, r)


def covariances(cloud: SplatCloud):
    """(N, 3, 3) covariance stack for a whole cloud."""
    return covariance(cloud.rot, cloud.scale)


def decompose_covariance(m, sym_tol=_SPD_SYM_TOL):
    """SPD matrix -> (scale, unit quaternion) with R diag(scale^2) R^T = m.

    Eigendecomposition; a reflection is repaired by negating the axis with
    smallest scale. Raises NotSPD for asymmetric or near-singular input.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError("expected a single 3x3 matrix")
    if np.max(np.abs(m - m.T)) > sym_tol * max(1.0, np.max(np.abs(m))):
        raise NotSPD("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise NotSPD(f"eigenvalue {w.min():.3e} below SPD tolerance")
    scale = np.sqrt(w)
    if np.linalg.det(v) < 0:
        v = v.copy()
        v[:, int(np.argmin(scale))] *= -1.0
    return scale, matrix_to_quat(v)


# ---------------------------------------------------------------------------
# PLY persistence (binary little endian, 3DGS community property layout)


def _parse_header(data):
    end = data.find(b"end_header\n")
    if end < 0:
        raise MalformedHeader("no end_header")
    header = data[: end + len(b"end_header\n")]
    lines = header.decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedHeader("not a PLY file")
    fmt = next((ln for ln in lines if ln.startswith("format ")), None)
    if fmt is None or "binary_little_endian" not in fmt:
        raise MalformedHeader("expected binary_little_endian format")
    count = None
    props = []
    in_vertex = False
    for ln in lines:
        parts = ln.strip().split()
        if not parts:
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] != "float":
                raise MalformedHeader(f"unsupported property type {parts[1]}")
            props.append(parts[2])
    if count is None:
        raise MalformedHeader("no vertex element")
    return len(header), count, props


def load_ply(path) -> SplatCloud:
    """Read a 3DGS PLY file.

    Scales are exponentiated, opacities passed through a sigmoid, and
    quaternions normalized; unknown float properties (f_rest_*, normals)
    are carried through opaquely in file order.
    """
    with open(path, "rb") as f:
        data = f.read()
    offset, count, props = _parse_header(data)
    if count == 0:
        raise EmptyCloud(f"{path} declares zero vertices")
    for name in REQUIRED_PROPS:
        if name not in props:
            raise MissingField(name)
    n_props = len(props)
    if len(data) - offset < 4 * count * n_props:
        raise MalformedHeader("vertex data truncated")
    body = np.frombuffer(data, dtype="<f4", count=count * n_props, offset=offset)
    table = body.reshape(count, n_props)
    col = {name: table[:, i] for i, name in enumerate(props)}

    raw_rot = np.stack([col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]], axis=1).astype(np.float64)
    norms = np.linalg.norm(raw_rot, axis=1)
    if np.any(norms < 1e-12):
        raise NormalizationFailure("zero-norm quaternion in file")

    extra_names = [p for p in props if p not in REQUIRED_PROPS]
    extra = np.stack([col[p] for p in extra_names], axis=1) if extra_names else None

    cloud = SplatCloud(
        mu=np.stack([col["x"], col["y"], col["z"]], axis=1).astype(np.float64),
        scale=np.exp(np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=1).astype(np.float64)),
        rot=raw_rot / norms[:, None],
        opacity=sigmoid(col["opacity"].astype(np.float64)),
        color=np.stack([col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]], axis=1).astype(np.float64),
        extra_names=extra_names,
        extra=extra,
        raw_table=table.copy(),
        raw_props=list(props),
    )
    return cloud.validate()


def save_ply(cloud: SplatCloud, path):
    """Write a cloud with inverse transforms (log scale, logit opacity).

    A cloud that came straight from load_ply is written from its preserved
    raw table, so load -> save is a byte-identical round trip.
    """
    if cloud.count == 0:
        raise EmptyCloud("refusing to write an empty cloud")
    if cloud.raw_table is not None:
        props = cloud.raw_props
        table = cloud.raw_table
    else:
        props = list(REQUIRED_PROPS) + list(cloud.extra_names)
        table = np.empty((cloud.count, len(props)), dtype="<f4")
        table[:, 0:3] = cloud.mu
        table[:, 3:6] = cloud.color
        table[:, 6] = logit(cloud.opacity)
        table[:, 7:10] = np.log(cloud.scale)
        table[:, 10:14] = cloud.rot
        if cloud.extra_names:
            table[:, 14:] = cloud.extra
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.count}"]
    header += [f"property float {p}" for p in props]
    header += ["end_header", ""]
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii"))
        f.write(np.ascontiguousarray(table, dtype="<f4").tobytes())
