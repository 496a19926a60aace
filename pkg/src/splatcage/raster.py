"""Differentiable CPU rasterizer for Gaussian splats.

Forward: perspective-affine projection of each 3D Gaussian to a 2D footprint,
global front-to-back depth sort (stable, index tie-break), tile-binned alpha
compositing with a 3-sigma Mahalanobis truncation and no low-alpha cutoff.
Backward: exact reverse-mode gradients to splat centroids and covariances,
computed per tile entry (no cross-thread accumulation) and reduced in a fixed
order, so results are bit-identical for any thread count.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .camera import CameraView
from .splats import SplatCloud, covariances
from .transport import DeformedSplats

TILE = 16
ALPHA_CAP = 1.0 - 1e-6
CUTOFF_SIGMA_SQ = 9.0  # 3-sigma Mahalanobis truncation


@dataclass
class SilhouetteMask:
    pixels: np.ndarray  # (H, W) float64 in [0, 1]

    @property
    def shape(self):
        return self.pixels.shape


def _splat_arrays(splats):
    if isinstance(splats, DeformedSplats):
        return splats.mu_prime, splats.sigma_prime, splats.source.opacity, splats.source.color
    if isinstance(splats, SplatCloud):
        return splats.mu, covariances(splats), splats.opacity, splats.color
    raise TypeError(f"cannot rasterize {type(splats).__name__}")


SH_C0 = 0.28209479177387814


def dc_to_rgb(dc):
    """Degree-0 SH coefficient -> displayable linear RGB in [0, 1]."""
    return np.clip(0.5 + SH_C0 * np.asarray(dc, dtype=np.float64), 0.0, 1.0)


class RenderContext:
    """Projection products and tile bins cached by a forward pass."""

    def __init__(self, view, mu, sigma, opacity, color):
        view.validate()
        self.view = view
        self.mu = mu
        self.cam_pos, self.rot_wc = view.basis()
        self.fx, self.fy, self.cx, self.cy = view.intrinsics()
        w, h = view.width, view.height

        t = (mu - self.cam_pos) @ self.rot_wc.T  # (N, 3) right/down/forward
        znear = 1e-4 * view.radius
        self.t = t

        vis = t[:, 2] > znear
        sigma_cam = np.einsum("ij,njk,lk->nil", self.rot_wc, sigma, self.rot_wc)
        z = np.where(vis, t[:, 2], 1.0)
        jp = np.zeros((len(mu), 2, 3))
        jp[:, 0, 0] = self.fx / z
        jp[:, 0, 2] = -self.fx * t[:, 0] / z**2
        jp[:, 1, 1] = self.fy / z
        jp[:, 1, 2] = -self.fy * t[:, 1] / z**2
        self.proj_jac = jp
        cov2d = jp @ sigma_cam @ jp.transpose(0, 2, 1)
        self.sigma_cam = sigma_cam

        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        ok = vis & np.isfinite(det) & (det > 1e-24) & (cov2d[:, 0, 0] > 0) & (cov2d[:, 1, 1] > 0)

        mean2d = np.stack(
            [self.fx * t[:, 0] / z + self.cx, self.fy * t[:, 1] / z + self.cy], axis=1
        )
        self.mean2d = mean2d
        self.cov2d = cov2d

        inv = np.zeros((len(mu), 3))
        with np.errstate(divide="ignore", invalid="ignore"):
            inv[:, 0] = cov2d[:, 1, 1] / det
            inv[:, 1] = -cov2d[:, 0, 1] / det
            inv[:, 2] = cov2d[:, 0, 0] / det
        self.invcov = np.where(ok[:, None], inv, 0.0)

        rx = 3.0 * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
        ry = 3.0 * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
        x0 = np.floor(mean2d[:, 0] - rx).astype(np.int64)
        x1 = np.ceil(mean2d[:, 0] + rx).astype(np.int64)
        y0 = np.floor(mean2d[:, 1] - ry).astype(np.int64)
        y1 = np.ceil(mean2d[:, 1] + ry).astype(np.int64)
        ok &= (x1 > 0) & (x0 < w) & (y1 > 0) & (y0 < h)

        # stable depth order with index tie-break
        order = np.argsort(t[:, 2], kind="stable")
        order = order[ok[order]]
        self.order = order

        self.ntx = (w + TILE - 1) // TILE
        self.nty = (h + TILE - 1) // TILE
        tx0 = np.clip(x0[order] // TILE, 0, self.ntx - 1)
        tx1 = np.clip((x1[order] - 1) // TILE, 0, self.ntx - 1)
        ty0 = np.clip(y0[order] // TILE, 0, self.nty - 1)
        ty1 = np.clip((y1[order] - 1) // TILE, 0, self.nty - 1)

        counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
        total = int(counts.sum())
        entry_splat, entry_tile = _fill_tile_entries(
            tx0, tx1, ty0, ty1, self.ntx, total
        )
        # sort by tile, keeping depth order within each tile
        perm = np.argsort(entry_tile, kind="stable")
        self.entry_rank = entry_splat[perm]          # rank in depth order
        self.entry_splat = order[self.entry_rank]    # original splat index
        self.tile_offsets = np.searchsorted(entry_tile[perm], np.arange(self.ntx * self.nty + 1))

        self.opacity = opacity
        self.rgb = dc_to_rgb(color)


def _empty_images(view):
    return np.zeros((view.height, view.width)), None


def render_silhouette(splats, view: CameraView):
    mask, _ = render_silhouette_ctx(splats, view)
    return mask


def render_silhouette_ctx(splats, view: CameraView):
    mu, sigma, opacity, color = _splat_arrays(splats)
    if len(mu) == 0:
        view.validate()
        return SilhouetteMask(np.zeros((view.height, view.width))), None
    ctx = RenderContext(view, mu, sigma, opacity, color)
    alpha = _forward_silhouette(
        ctx.mean2d, ctx.invcov, ctx.opacity, ctx.entry_splat, ctx.tile_offsets,
        view.width, view.height, ctx.ntx,
    )
    return SilhouetteMask(alpha), ctx


def render_color(splats, view: CameraView, background=(0.0, 0.0, 0.0)):
    """RGBA float image (H, W, 4); alpha matches render_silhouette exactly."""
    img, _ = render_color_ctx(splats, view, background)
    return img


def render_color_ctx(splats, view: CameraView, background=(0.0, 0.0, 0.0)):
    mu, sigma, opacity, color = _splat_arrays(splats)
    bg = np.asarray(background, dtype=np.float64)
    if len(mu) == 0:
        view.validate()
        out = np.zeros((view.height, view.width, 4))
        out[:, :, :3] = bg
        return out, None
    ctx = RenderContext(view, mu, sigma, opacity, color)
    out = _forward_color(
        ctx.mean2d, ctx.invcov, ctx.opacity, ctx.rgb, bg,
        ctx.entry_splat, ctx.tile_offsets, view.width, view.height, ctx.ntx,
    )
    return out, ctx


def silhouette_adjoint(ctx: RenderContext, upstream):
    """Upstream (H, W) gradient on alpha -> (grad_mu, grad_sigma)."""
    if ctx is None:
        raise ValueError("adjoint requires the context of a non-empty forward pass")
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    d_mean_e, d_inv_e, _ = _backward_silhouette(
        ctx.mean2d, ctx.invcov, ctx.opacity, ctx.entry_splat, ctx.tile_offsets,
        upstream, ctx.view.width, ctx.view.height, ctx.ntx,
    )
    return _reduce_entries(ctx, d_mean_e, d_inv_e)


def color_adjoint(ctx: RenderContext, upstream_rgb, upstream_alpha=None):
    """Upstream (H, W, 3) [+ optional (H, W) alpha] -> (grad_mu, grad_sigma)."""
    if ctx is None:
        raise ValueError("adjoint requires the context of a non-empty forward pass")
    upstream_rgb = np.ascontiguousarray(upstream_rgb, dtype=np.float64)
    if upstream_alpha is None:
        upstream_alpha = np.zeros(upstream_rgb.shape[:2])
    upstream_alpha = np.ascontiguousarray(upstream_alpha, dtype=np.float64)
    d_mean_e, d_inv_e, _ = _backward_color(
        ctx.mean2d, ctx.invcov, ctx.opacity, ctx.rgb, ctx.entry_splat, ctx.tile_offsets,
        upstream_rgb, upstream_alpha, ctx.view.width, ctx.view.height, ctx.ntx,
    )
    return _reduce_entries(ctx, d_mean_e, d_inv_e)


def _reduce_entries(ctx, d_mean_e, d_inv_e):
    """Sum per-entry gradients per splat, then pull back through projection."""
    n = len(ctx.mu)
    d_mean = np.zeros((n, 2))
    d_inv = np.zeros((n, 3))
    np.add.at(d_mean, ctx.entry_splat, d_mean_e)
    np.add.at(d_inv, ctx.entry_splat, d_inv_e)

    # inverse-covariance -> covariance
    q = np.zeros((n, 2, 2))
    q[:, 0, 0] = ctx.invcov[:, 0]
    q[:, 0, 1] = q[:, 1, 0] = ctx.invcov[:, 1]
    q[:, 1, 1] = ctx.invcov[:, 2]
    # the kernel's qb drives both off-diagonals; split its gradient evenly
    dq = np.zeros((n, 2, 2))
    dq[:, 0, 0] = d_inv[:, 0]
    dq[:, 0, 1] = dq[:, 1, 0] = 0.5 * d_inv[:, 1]
    dq[:, 1, 1] = d_inv[:, 2]
    d_cov2d = -q @ dq @ q

    m = ctx.proj_jac @ ctx.rot_wc  # (N, 2, 3)
    sym = d_cov2d + d_cov2d.transpose(0, 2, 1)
    half = 0.5 * sym
    d_sigma = m.transpose(0, 2, 1) @ half @ m

    # mean2d chain plus the dependence of the projection Jacobian on t;
    # cov2d = Jp Sigma_cam Jp^T, so this term lives in the camera frame
    d_t = np.einsum("nij,ni->nj", ctx.proj_jac, d_mean)
    d_jp = np.einsum("nij,njk,nlk->nil", sym, ctx.proj_jac, ctx.sigma_cam)
    t = ctx.t
    z = t[:, 2]
    fx, fy = ctx.fx, ctx.fy
    d_t[:, 0] += d_jp[:, 0, 2] * (-fx / z**2)
    d_t[:, 1] += d_jp[:, 1, 2] * (-fy / z**2)
    d_t[:, 2] += (
        d_jp[:, 0, 0] * (-fx / z**2)
        + d_jp[:, 0, 2] * (2 * fx * t[:, 0] / z**3)
        + d_jp[:, 1, 1] * (-fy / z**2)
        + d_jp[:, 1, 2] * (2 * fy * t[:, 1] / z**3)
    )
    d_mu = d_t @ ctx.rot_wc
    return d_mu, d_sigma


# ---------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _fill_tile_entries(tx0, tx1, ty0, ty1, ntx, total):
    entry_splat = np.empty(total, dtype=np.int64)  # index into the depth order
    entry_tile = np.empty(total, dtype=np.int64)
    pos = 0
    for r in range(len(tx0)):
        for ty in range(ty0[r], ty1[r] + 1):
            base = ty * ntx
            for tx in range(tx0[r], tx1[r] + 1):
                entry_splat[pos] = r
                entry_tile[pos] = base + tx
                pos += 1
    return entry_splat, entry_tile


@njit(cache=True, parallel=True, fastmath=False)
def _forward_silhouette(mean2d, invcov, opacity, entry_splat, tile_offsets, w, h, ntx):
    out = np.zeros((h, w))
    n_tiles = len(tile_offsets) - 1
    for tile in prange(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        ty = tile // ntx
        tx = tile % ntx
        y_end = min((ty + 1) * TILE, h)
        x_end = min((tx + 1) * TILE, w)
        for py in range(ty * TILE, y_end):
            cy = py + 0.5
            for px in range(tx * TILE, x_end):
                cx = px + 0.5
                transmittance = 1.0
                for e in range(lo, hi):
                    s = entry_splat[e]
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    m2 = invcov[s, 0] * dx * dx + 2.0 * invcov[s, 1] * dx * dy + invcov[s, 2] * dy * dy
                    if m2 > CUTOFF_SIGMA_SQ or m2 < 0.0:
                        continue
                    a = opacity[s] * np.exp(-0.5 * m2)
                    if a > ALPHA_CAP:
                        a = ALPHA_CAP
                    transmittance *= 1.0 - a
                out[py, px] = 1.0 - transmittance
    return out


@njit(cache=True, parallel=True, fastmath=False)
def _forward_color(mean2d, invcov, opacity, rgb, bg, entry_splat, tile_offsets, w, h, ntx):
    out = np.zeros((h, w, 4))
    n_tiles = len(tile_offsets) - 1
    for tile in prange(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        ty = tile // ntx
        tx = tile % ntx
        y_end = min((ty + 1) * TILE, h)
        x_end = min((tx + 1) * TILE, w)
        for py in range(ty * TILE, y_end):
            cy = py + 0.5
            for px in range(tx * TILE, x_end):
                cx = px + 0.5
                transmittance = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for e in range(lo, hi):
                    s = entry_splat[e]
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    m2 = invcov[s, 0] * dx * dx + 2.0 * invcov[s, 1] * dx * dy + invcov[s, 2] * dy * dy
                    if m2 > CUTOFF_SIGMA_SQ or m2 < 0.0:
                        continue
                    a = opacity[s] * np.exp(-0.5 * m2)
                    if a > ALPHA_CAP:
                        a = ALPHA_CAP
                    weight = a * transmittance
                    r += rgb[s, 0] * weight
                    g += rgb[s, 1] * weight
                    b += rgb[s, 2] * weight
                    transmittance *= 1.0 - a
                out[py, px, 0] = r + bg[0] * transmittance
                out[py, px, 1] = g + bg[1] * transmittance
                out[py, px, 2] = b + bg[2] * transmittance
                out[py, px, 3] = 1.0 - transmittance
    return out


@njit(cache=True, parallel=True, fastmath=False)
def _backward_silhouette(mean2d, invcov, opacity, entry_splat, tile_offsets, upstream, w, h, ntx):
    # dA/da_k = Tpre_k * prod_{j>k}(1-a_j); both factors kept division-free:
    # Tpre from a forward pass, the suffix from a back-to-front recurrence.
    n_entries = len(entry_splat)
    d_mean = np.zeros((n_entries, 2))
    d_inv = np.zeros((n_entries, 3))
    d_alpha = np.zeros(n_entries)
    n_tiles = len(tile_offsets) - 1
    for tile in prange(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        ty = tile // ntx
        tx = tile % ntx
        y_end = min((ty + 1) * TILE, h)
        x_end = min((tx + 1) * TILE, w)
        n_local = hi - lo
        avals = np.empty(n_local)
        tpre = np.empty(n_local)
        for py in range(ty * TILE, y_end):
            cy = py + 0.5
            for px in range(tx * TILE, x_end):
                up = upstream[py, px]
                if up == 0.0:
                    continue
                cx = px + 0.5
                transmittance = 1.0
                for k in range(n_local):
                    s = entry_splat[lo + k]
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    m2 = invcov[s, 0] * dx * dx + 2.0 * invcov[s, 1] * dx * dy + invcov[s, 2] * dy * dy
                    if m2 > CUTOFF_SIGMA_SQ or m2 < 0.0:
                        avals[k] = -1.0  # sentinel: not contributing
                        tpre[k] = transmittance
                    else:
                        a = opacity[s] * np.exp(-0.5 * m2)
                        if a > ALPHA_CAP:
                            a = ALPHA_CAP
                        avals[k] = a
                        tpre[k] = transmittance
                        transmittance *= 1.0 - a
                suffix = 1.0
                for k in range(n_local - 1, -1, -1):
                    a = avals[k]
                    if a < 0.0:
                        continue
                    grad_a = up * tpre[k] * suffix
                    suffix *= 1.0 - a
                    s = entry_splat[lo + k]
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    m2 = invcov[s, 0] * dx * dx + 2.0 * invcov[s, 1] * dx * dy + invcov[s, 2] * dy * dy
                    gexp = np.exp(-0.5 * m2)
                    a_raw = opacity[s] * gexp
                    if a_raw <= ALPHA_CAP:
                        e = lo + k
                        d_alpha[e] += grad_a * gexp
                        grad_m2 = grad_a * a_raw * (-0.5)
                        gx = 2.0 * (invcov[s, 0] * dx + invcov[s, 1] * dy)
                        gy = 2.0 * (invcov[s, 1] * dx + invcov[s, 2] * dy)
                        d_mean[e, 0] += -grad_m2 * gx
                        d_mean[e, 1] += -grad_m2 * gy
                        d_inv[e, 0] += grad_m2 * dx * dx
                        d_inv[e, 1] += grad_m2 * 2.0 * dx * dy
                        d_inv[e, 2] += grad_m2 * dy * dy
    return d_mean, d_inv, d_alpha


@njit(cache=True, parallel=True, fastmath=False)
def _backward_color(mean2d, invcov, opacity, rgb, entry_splat, tile_offsets,
                    upstream_rgb, upstream_alpha, w, h, ntx):
    n_entries = len(entry_splat)
    d_mean = np.zeros((n_entries, 2))
    d_inv = np.zeros((n_entries, 3))
    d_alpha = np.zeros(n_entries)
    n_tiles = len(tile_offsets) - 1
    for tile in prange(n_tiles):
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        ty = tile // ntx
        tx = tile % ntx
        y_end = min((ty + 1) * TILE, h)
        x_end = min((tx + 1) * TILE, w)
        n_local = hi - lo
        avals = np.empty(n_local)
        tpre = np.empty(n_local)
        for py in range(ty * TILE, y_end):
            cy = py + 0.5
            for px in range(tx * TILE, x_end):
                upr = upstream_rgb[py, px, 0]
                upg = upstream_rgb[py, px, 1]
                upb = upstream_rgb[py, px, 2]
                upa = upstream_alpha[py, px]
                if upr == 0.0 and upg == 0.0 and upb == 0.0 and upa == 0.0:
                    continue
                cx = px + 0.5
                transmittance = 1.0
                for k in range(n_local):
                    s = entry_splat[lo + k]
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    m2 = invcov[s, 0] * dx * dx + 2.0 * invcov[s, 1] * dx * dy + invcov[s, 2] * dy * dy
                    if m2 > CUTOFF_SIGMA_SQ or m2 < 0.0:
                        avals[k] = -1.0
                        tpre[k] = transmittance
                    else:
                        a = opacity[s] * np.exp(-0.5 * m2)
                        if a > ALPHA_CAP:
                            a = ALPHA_CAP
                        avals[k] = a
                        tpre[k] = transmittance
                        transmittance *= 1.0 - a
                # back-to-front: Srest = prod_{j>k}(1-a_j) and the color
                # accumulated behind k with unit transmittance (Crest);
                # dC/da_k = Tpre_k (c_k - Crest_k), dA/da_k = Tpre_k Srest_k
                srest = 1.0
                crest_r = 0.0
                crest_g = 0.0
                crest_b = 0.0
                for k in range(n_local - 1, -1, -1):
                    a = avals[k]
                    if a < 0.0:
                        continue
                    s = entry_splat[lo + k]
                    grad_a = (
                        upa * tpre[k] * srest
                        + upr * tpre[k] * (rgb[s, 0] - crest_r)
                        + upg * tpre[k] * (rgb[s, 1] - crest_g)
                        + upb * tpre[k] * (rgb[s, 2] - crest_b)
                    )
                    srest *= 1.0 - a
                    crest_r = rgb[s, 0] * a + (1.0 - a) * crest_r
                    crest_g = rgb[s, 1] * a + (1.0 - a) * crest_g
                    crest_b = rgb[s, 2] * a + (1.0 - a) * crest_b
                    dx = cx - mean2d[s, 0]
                    dy = cy - mean2d[s, 1]
                    m2 = invcov[s, 0] * dx * dx + 2.0 * invcov[s, 1] * dx * dy + invcov[s, 2] * dy * dy
                    gexp = np.exp(-0.5 * m2)
                    a_raw = opacity[s] * gexp
                    if a_raw <= ALPHA_CAP:
                        e = lo + k
                        d_alpha[e] += grad_a * gexp
                        grad_m2 = grad_a * a_raw * (-0.5)
                        gx = 2.0 * (invcov[s, 0] * dx + invcov[s, 1] * dy)
                        gy = 2.0 * (invcov[s, 1] * dx + invcov[s, 2] * dy)
                        d_mean[e, 0] += -grad_m2 * gx
                        d_mean[e, 1] += -grad_m2 * gy
                        d_inv[e, 0] += grad_m2 * dx * dx
                        d_inv[e, 1] += grad_m2 * 2.0 * dx * dy
                        d_inv[e, 2] += grad_m2 * dy * dy
    return d_mean, d_inv, d_alpha


# ---------------------------------------------------------------------------
# image IO


def save_mask_png(mask, path):
    from PIL import Image

    arr = mask.pixels if isinstance(mask, SilhouetteMask) else np.asarray(mask)
    img = Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L")
    img.save(path)


def load_mask_png(path) -> SilhouetteMask:
    from PIL import Image

    img = Image.open(path).convert("L")
    return SilhouetteMask(np.asarray(img, dtype=np.float64) / 255.0)


def save_rgb_png(rgb, path):
    from PIL import Image

    arr = np.asarray(rgb)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    img = Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="RGB")
    img.save(path)


def load_rgb_png(path):
    from PIL import Image

    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_mask_raw(mask, path):
    arr = mask.pixels if isinstance(mask, SilhouetteMask) else np.asarray(mask)
    with open(path, "wb") as f:
        f.write(b"SCMK")
        f.write(np.array(arr.shape, dtype="<i8").tobytes())
        f.write(arr.astype("<f4").tobytes())


def load_mask_raw(path) -> SilhouetteMask:
    with open(path, "rb") as f:
        if f.read(4) != b"SCMK":
            raise ValueError("not a raw mask file")
        h, w = np.frombuffer(f.read(16), dtype="<i8")
        pixels = np.frombuffer(f.read(4 * h * w), dtype="<f4").reshape(h, w)
    return SilhouetteMask(pixels.astype(np.float64))
