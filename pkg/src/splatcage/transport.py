"""Carry Gaussian splats through a cage deformation.

Centroids map through the coordinate tables; covariances conjugate by the
map's spatial Jacobian. The adjoint propagates gradients on deformed
centroids/covariances back to cage vertex positions, including the
dependence of the scaled face normals on the deformed vertices.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .cage import DeformedCage
from .coords import CoordinateTables, evaluate_jacobian, evaluate_map, stretch_factors
from .splats import SplatCloud, covariances, decompose_covariance, matrix_to_quat
from .errors import NotSPD

EIGENVALUE_FLOOR = 1e-10


@dataclass
class DeformedSplats:
    mu_prime: np.ndarray     # (N, 3)
    sigma_prime: np.ndarray  # (N, 3, 3) symmetric
    source: SplatCloud

    @property
    def count(self):
        return int(self.mu_prime.shape[0])

    def jacobian_determinants(self, tables, cage_def):
        """det J_f per splat; negative values flag local inversion."""
        return np.linalg.det(evaluate_jacobian(tables, cage_def))


def transport(cloud: SplatCloud, tables: CoordinateTables, cage_def: DeformedCage) -> DeformedSplats:
    mu_prime = evaluate_map(tables, cage_def)
    jac = evaluate_jacobian(tables, cage_def)
    sigma = covariances(cloud)
    sigma_prime = jac @ sigma @ jac.transpose(0, 2, 1)
    sigma_prime = 0.5 * (sigma_prime + sigma_prime.transpose(0, 2, 1))
    return DeformedSplats(mu_prime=mu_prime, sigma_prime=sigma_prime, source=cloud)


def transport_adjoint(cloud, tables, cage_def, grad_mu, grad_sigma):
    """Gradients on deformed cage vertices from upstream splat gradients.

    grad_mu: (N, 3), grad_sigma: (N, 3, 3). Returns (V, 3).
    """
    grad_mu = np.asarray(grad_mu, dtype=np.float64)
    grad_sigma = np.asarray(grad_sigma, dtype=np.float64)
    n_pts = tables.n_points

    jac = evaluate_jacobian(tables, cage_def)
    sigma = covariances(cloud)
    # d(J Sigma J^T)/dJ contracted with the (symmetrized) upstream gradient
    gsym = grad_sigma + grad_sigma.transpose(0, 2, 1)
    grad_jac = gsym @ jac @ sigma  # (N, 3, 3)

    # accumulate into vertex-position and scaled-normal slots
    grad_a = tables.phi.T @ grad_mu                     # (V, 3)
    grad_b = tables.psi.T @ grad_mu                     # (F, 3)
    gphi, gpsi = tables.grad_matrices()                 # (P*3c, V), (P*3c, F)
    gj = np.ascontiguousarray(grad_jac.transpose(0, 2, 1).reshape(n_pts * 3, 3))
    grad_a += gphi.T @ gj
    grad_b += gpsi.T @ gj

    # through b_t = sigma_t * nhat'_t
    rest = cage_def.rest
    f = rest.faces
    vdef = cage_def.vertices
    up = vdef[f[:, 1]] - vdef[f[:, 0]]
    vp = vdef[f[:, 2]] - vdef[f[:, 0]]
    c = np.cross(up, vp)
    cn = np.linalg.norm(c, axis=1)
    nhat = c / cn[:, None]
    sig = stretch_factors(rest, vdef)

    grad_sig = np.einsum("fi,fi->f", nhat, grad_b)
    grad_nhat = sig[:, None] * grad_b
    gc = (grad_nhat - np.einsum("fi,fi->f", grad_nhat, nhat)[:, None] * nhat) / cn[:, None]

    grad_up = np.cross(vp, gc)
    grad_vp = np.cross(gc, up)

    # stretch factor: sigma = sqrt(g) / (sqrt8 * A_rest)
    u = rest.vertices[f[:, 1]] - rest.vertices[f[:, 0]]
    v = rest.vertices[f[:, 2]] - rest.vertices[f[:, 0]]
    uu = np.einsum("fi,fi->f", u, u)
    vv = np.einsum("fi,fi->f", v, v)
    uv = np.einsum("fi,fi->f", u, v)
    denom = sig * 8.0 * rest.face_areas**2
    denom = np.where(denom > 0, denom, 1.0)
    coef = grad_sig / denom
    grad_up += coef[:, None] * (vv[:, None] * up - uv[:, None] * vp)
    grad_vp += coef[:, None] * (uu[:, None] * vp - uv[:, None] * up)

    out = grad_a
    np.add.at(out, f[:, 1], grad_up)
    np.add.at(out, f[:, 2], grad_vp)
    np.add.at(out, f[:, 0], -(grad_up + grad_vp))
    return out


def export_deformed(deformed: DeformedSplats) -> SplatCloud:
    """Re-persistable cloud: decompose each deformed covariance to scale+rot.

    Covariances crushed to (near) zero along an axis are clamped to the
    eigenvalue floor and reported with a warning rather than failing the
    whole export.
    """
    n = deformed.count
    src = deformed.source
    scales = np.empty((n, 3))
    quats = np.empty((n, 4))
    eigvals, eigvecs = np.linalg.eigh(deformed.sigma_prime)
    clamped = np.nonzero(eigvals[:, 0] <= EIGENVALUE_FLOOR)[0]
    if clamped.size:
        warnings.warn(
            f"{clamped.size} splat covariances degenerated (min eig <= {EIGENVALUE_FLOOR:g}); "
            "clamped to the eigenvalue floor",
            RuntimeWarning,
        )
        eigvals = np.maximum(eigvals, EIGENVALUE_FLOOR)
    scales = np.sqrt(eigvals)
    dets = np.linalg.det(eigvecs)
    flip = dets < 0
    eigvecs[flip, :, 0] *= -1.0  # eigh sorts ascending: column 0 is the smallest scale
    quats = matrix_to_quat(eigvecs)
    return SplatCloud(
        mu=deformed.mu_prime.copy(),
        scale=scales,
        rot=quats,
        opacity=src.opacity.copy(),
        color=src.color.copy(),
        extra_names=list(src.extra_names),
        extra=None if src.extra is None else src.extra.copy(),
    ).validate()
