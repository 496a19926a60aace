import numpy as np
import pytest

from splatcage.camera import CameraView
from splatcage.errors import ViewInvalid
from splatcage.raster import (
    SilhouetteMask,
    color_adjoint,
    load_mask_png,
    load_mask_raw,
    render_color,
    render_color_ctx,
    render_silhouette,
    render_silhouette_ctx,
    save_mask_png,
    save_mask_raw,
    silhouette_adjoint,
)
from splatcage.splats import SplatCloud
from splatcage.transport import DeformedSplats

from conftest import random_cloud


def single_splat(mu=(0.0, 0.0, 0.0), scale=0.3, opacity=1.0, color=(0.0, 0.0, 0.0)):
    return SplatCloud.from_arrays(
        mu=np.array([mu]),
        scale=np.full((1, 3), scale),
        rot=np.array([[1.0, 0, 0, 0]]),
        opacity=np.array([opacity]),
        color=np.array([color]),
    )


VIEW = CameraView(elevation=0.0, azimuth=0.0, radius=4.0, fov_y=45.0, width=64, height=64)


class TestCamera:
    def test_invalid_views(self):
        with pytest.raises(ViewInvalid):
            CameraView(width=8).validate()
        with pytest.raises(ViewInvalid):
            CameraView(fov_y=5.0).validate()
        with pytest.raises(ViewInvalid):
            CameraView(radius=0.0).validate()

    def test_look_at_projects_to_center(self):
        pos, rot = VIEW.basis()
        t = rot @ (np.zeros(3) - pos)
        assert t[0] == pytest.approx(0.0, abs=1e-12)
        assert t[1] == pytest.approx(0.0, abs=1e-12)
        assert t[2] == pytest.approx(4.0, abs=1e-12)


class TestForward:
    def test_zero_splats(self):
        cloud = SplatCloud(
            mu=np.zeros((0, 3)), scale=np.zeros((0, 3)), rot=np.zeros((0, 4)),
            opacity=np.zeros(0), color=np.zeros((0, 3)),
        )
        mask = render_silhouette(cloud, VIEW)
        assert mask.pixels.shape == (64, 64)
        np.testing.assert_array_equal(mask.pixels, 0.0)

    def test_single_splat_closed_form(self):
        """Center-pixel alpha must match the analytic projected Gaussian."""
        cloud = single_splat(scale=0.3, opacity=1.0)
        view = CameraView(radius=4.0, fov_y=45.0, width=65, height=65)  # odd: center pixel on axis
        mask = render_silhouette(cloud, view)
        fy = 0.5 * 65 / np.tan(0.5 * np.deg2rad(45.0))
        # isotropic world sigma=0.3 at depth 4 projects to sigma_px = fy * 0.3 / 4
        sigma_px = fy * 0.3 / 4.0
        # center pixel sits exactly at the principal point (65/2 = 32.5 = pixel 32 center)
        expected = 1.0 * np.exp(-0.5 * 0.0 / sigma_px**2)
        got = mask.pixels[32, 32]
        assert abs(got - expected) < 1e-3
        # one pixel to the right: offset 1 px
        expected_off = np.exp(-0.5 * (1.0 / sigma_px) ** 2)
        assert abs(mask.pixels[32, 33] - expected_off) < 1e-3

    def test_two_splat_compositing(self):
        cloud = SplatCloud.from_arrays(
            mu=np.array([[0.0, 0, 0], [0.05, 0, 0]]),  # nearly same depth cell
            scale=np.full((2, 3), 0.4),
            rot=np.tile([1.0, 0, 0, 0], (2, 1)),
            opacity=np.array([0.5, 0.5]),
            color=np.zeros((2, 3)),
        )
        view = CameraView(radius=4.0, fov_y=45.0, width=65, height=65)
        mask = render_silhouette(cloud, view)
        # both splats cover the center with g ~ 1: alpha = 1 - 0.5^2
        assert abs(mask.pixels[32, 32] - 0.75) < 1e-3

    def test_values_in_unit_interval(self, rng):
        cloud = random_cloud(50, rng)
        mask = render_silhouette(cloud, VIEW)
        assert mask.pixels.min() >= 0.0
        assert mask.pixels.max() <= 1.0

    def test_monotone_in_opacity(self, rng):
        cloud = random_cloud(30, rng)
        m1 = render_silhouette(cloud, VIEW)
        boosted = SplatCloud.from_arrays(
            cloud.mu, cloud.scale, cloud.rot, np.minimum(cloud.opacity + 0.2, 1.0), cloud.color
        )
        m2 = render_silhouette(boosted, VIEW)
        assert np.all(m2.pixels >= m1.pixels - 1e-12)

    def test_determinism(self, rng):
        cloud = random_cloud(80, rng)
        a = render_silhouette(cloud, VIEW).pixels
        b = render_silhouette(cloud, VIEW).pixels
        np.testing.assert_array_equal(a, b)

    def test_color_alpha_matches_silhouette(self, rng):
        cloud = random_cloud(40, rng)
        mask = render_silhouette(cloud, VIEW)
        rgba = render_color(cloud, VIEW)
        np.testing.assert_array_equal(rgba[:, :, 3], mask.pixels)

    def test_red_splat_center(self):
        from splatcage.raster import SH_C0

        red_dc = (np.array([1.0, 0.0, 0.0]) - 0.5) / SH_C0
        cloud = single_splat(color=tuple(red_dc))
        rgba = render_color(cloud, VIEW)
        center = rgba[32, 32]
        assert center[0] > 0.9
        assert center[1] < 0.1 and center[2] < 0.1

    def test_background_color(self):
        cloud = SplatCloud(
            mu=np.zeros((0, 3)), scale=np.zeros((0, 3)), rot=np.zeros((0, 4)),
            opacity=np.zeros(0), color=np.zeros((0, 3)),
        )
        rgba = render_color(cloud, VIEW, background=(0.2, 0.4, 0.6))
        np.testing.assert_allclose(rgba[0, 0, :3], [0.2, 0.4, 0.6])


def zero_near_truncation(upstream, ctx, band=(7.5, 10.5)):
    """Silence FD probes at pixels near any splat's 3-sigma cutoff boundary
    (the compositing there is only sub-differentiable)."""
    h, w = upstream.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    keep = np.ones((h, w), dtype=bool)
    for s in range(len(ctx.mean2d)):
        dx = px - ctx.mean2d[s, 0]
        dy = py - ctx.mean2d[s, 1]
        qa, qb, qc = ctx.invcov[s]
        m2 = qa * dx * dx + 2 * qb * dx * dy + qc * dy * dy
        keep &= (m2 < band[0]) | (m2 > band[1])
    out = upstream.copy()
    out[~keep] = 0.0
    return out


def fd_probe(cloud, view, upstream, n_dirs, rng, mode="silhouette"):
    """Directional FD of sum(upstream * render) wrt (mu, sigma)."""
    from splatcage.splats import covariances

    mu0 = cloud.mu.copy()
    sigma0 = covariances(cloud)

    def loss(mu, sigma):
        spl = DeformedSplats(mu_prime=mu, sigma_prime=sigma, source=cloud)
        if mode == "silhouette":
            return np.sum(render_silhouette(spl, view).pixels * upstream)
        img = render_color(spl, view)
        return np.sum(img[:, :, :3] * upstream)

    if mode == "silhouette":
        _, ctx = render_silhouette_ctx(DeformedSplats(mu0, sigma0, cloud), view)
        upstream = zero_near_truncation(upstream, ctx)
        g_mu, g_sigma = silhouette_adjoint(ctx, upstream)
    else:
        _, ctx = render_color_ctx(DeformedSplats(mu0, sigma0, cloud), view)
        upstream = zero_near_truncation(upstream, ctx)
        g_mu, g_sigma = color_adjoint(ctx, upstream)

    eps = 1e-5
    results = []
    for _ in range(n_dirs):
        d_mu = rng.normal(size=mu0.shape)
        d_sig = rng.normal(size=sigma0.shape)
        d_sig = 0.5 * (d_sig + d_sig.transpose(0, 2, 1))
        norm = np.sqrt(np.sum(d_mu**2) + np.sum(d_sig**2))
        d_mu /= norm
        d_sig /= norm
        fd = (loss(mu0 + eps * d_mu, sigma0 + eps * d_sig) - loss(mu0 - eps * d_mu, sigma0 - eps * d_sig)) / (2 * eps)
        analytic = np.sum(g_mu * d_mu) + np.sum(g_sigma * d_sig)
        results.append((fd, analytic))
    return results


class TestAdjoint:
    def test_zero_upstream(self, rng):
        cloud = random_cloud(10, rng)
        _, ctx = render_silhouette_ctx(cloud, VIEW)
        g_mu, g_sigma = silhouette_adjoint(ctx, np.zeros((64, 64)))
        np.testing.assert_array_equal(g_mu, 0.0)
        np.testing.assert_array_equal(g_sigma, 0.0)

    def test_single_splat_pull_direction(self):
        """Upstream mass right of center pulls the splat toward +right."""
        cloud = single_splat(scale=0.25, opacity=0.9)
        view = CameraView(radius=4.0, fov_y=45.0, width=33, height=33)
        upstream = np.zeros((33, 33))
        upstream[16, 22] = 1.0  # same row, right of center
        _, ctx = render_silhouette_ctx(cloud, view)
        g_mu, _ = silhouette_adjoint(ctx, upstream)
        pos, rot = view.basis()
        right = rot[0]
        # increasing alpha at a right-side pixel requires moving right
        assert g_mu[0] @ right > 0

    def test_fd_silhouette_small_fixture(self):
        rng = np.random.default_rng(31)
        cloud = random_cloud(3, rng, extent=0.4)
        view = CameraView(radius=4.0, fov_y=50.0, width=32, height=32)
        upstream = rng.normal(size=(32, 32))
        for fd, analytic in fd_probe(cloud, view, upstream, 10, rng):
            assert abs(fd - analytic) / max(abs(fd), 1e-8) < 2e-3

    def test_fd_silhouette_ten_splats(self):
        rng = np.random.default_rng(77)
        cloud = random_cloud(10, rng, extent=0.5)
        view = CameraView(radius=4.0, fov_y=50.0, width=32, height=32)
        upstream = rng.normal(size=(32, 32))
        for fd, analytic in fd_probe(cloud, view, upstream, 8, rng):
            assert abs(fd - analytic) / max(abs(fd), 1e-8) < 2e-3

    def test_fd_color(self):
        rng = np.random.default_rng(13)
        cloud = random_cloud(5, rng, extent=0.4)
        view = CameraView(radius=4.0, fov_y=50.0, width=32, height=32)
        upstream = rng.normal(size=(32, 32, 3))
        for fd, analytic in fd_probe(cloud, view, upstream, 8, rng, mode="color"):
            assert abs(fd - analytic) / max(abs(fd), 1e-8) < 2e-3


class TestImageIO:
    def test_png_round_trip(self, tmp_path, rng):
        mask = SilhouetteMask(np.round(rng.random((20, 30)) * 255) / 255.0)
        path = tmp_path / "m.png"
        save_mask_png(mask, path)
        back = load_mask_png(path)
        np.testing.assert_allclose(back.pixels, mask.pixels, atol=1 / 510)

    def test_raw_round_trip(self, tmp_path, rng):
        mask = SilhouetteMask(rng.random((17, 23)))
        path = tmp_path / "m.raw"
        save_mask_raw(mask, path)
        back = load_mask_raw(path)
        np.testing.assert_allclose(back.pixels, mask.pixels, atol=1e-7)
