"""Synthetic deformation-recovery benchmarks.

Two scenes with analytically deformed targets:

* translation: a sphere-shell cloud whose target silhouette is the same cloud
  shifted by a tenth of the image width along the camera's right axis;
* bending: a capsule cloud bent by a per-height rotation about the x axis,
  rendered side-on so the bend shows in the silhouette.

Both are exactly realizable by a cage deformation, so recovery quality is a
property of the optimizer, not of the target construction. The same scenes
back the parameterization ablation.
"""

from dataclasses import dataclass

import numpy as np

from .cage import build_cage
from .camera import CameraView
from .guidance import MockGuidanceClient
from .optimize import DeformJob, OptimConfig, run
from .raster import render_silhouette
from .splats import SplatCloud, covariance
from .transport import DeformedSplats


def sphere_cloud(n, seed=0, radius=1.0, opacity=0.9) -> SplatCloud:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    mu = d * radius
    sigma = 1.3 * radius * np.sqrt(4.0 * np.pi / n)
    return SplatCloud.from_arrays(
        mu=mu,
        scale=np.full((n, 3), sigma),
        rot=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacity=np.full(n, opacity),
        color=np.tile([0.5, 0.2, -0.3], (n, 1)),
    )


def capsule_cloud(n, seed=0, radius=0.35, half_height=0.8, opacity=0.9) -> SplatCloud:
    """Splats on a capsule surface: cylinder along z plus hemispherical caps."""
    rng = np.random.default_rng(seed)
    cyl_area = 2 * np.pi * radius * 2 * half_height
    cap_area = 4 * np.pi * radius**2
    n_cyl = int(n * cyl_area / (cyl_area + cap_area))
    n_cap = n - n_cyl

    theta = rng.uniform(0, 2 * np.pi, n_cyl)
    z = rng.uniform(-half_height, half_height, n_cyl)
    cyl = np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)

    d = rng.normal(size=(n_cap, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    caps = d * radius
    caps[:, 2] += np.sign(caps[:, 2]) * half_height

    mu = np.vstack([cyl, caps])
    area = cyl_area + cap_area
    sigma = 1.3 * np.sqrt(area / n / np.pi)
    return SplatCloud.from_arrays(
        mu=mu,
        scale=np.full((n, 3), sigma),
        rot=np.tile([1.0, 0, 0, 0], (n, 1)),
        opacity=np.full(n, opacity),
        color=np.tile([0.2, 0.5, -0.2], (n, 1)),
    )


def bend_about_x(points, angle_deg, z_min=-1.0, z_max=1.0):
    """Per-height rotation about the x axis: 0 at z_min up to angle at z_max.

    Returns (mapped points, per-point rotation matrices).
    """
    pts = np.asarray(points, dtype=np.float64)
    frac = np.clip((pts[:, 2] - z_min) / (z_max - z_min), 0.0, 1.0)
    theta = np.deg2rad(angle_deg) * frac
    c, s = np.cos(theta), np.sin(theta)
    rots = np.zeros((len(pts), 3, 3))
    rots[:, 0, 0] = 1.0
    rots[:, 1, 1] = c
    rots[:, 1, 2] = -s
    rots[:, 2, 1] = s
    rots[:, 2, 2] = c
    mapped = np.einsum("nij,nj->ni", rots, pts)
    return mapped, rots


def bent_cloud(cloud: SplatCloud, angle_deg, z_min=-1.0, z_max=1.0) -> DeformedSplats:
    """Oracle deformation: rotate centroids and conjugate covariances."""
    mapped, rots = bend_about_x(cloud.mu, angle_deg, z_min, z_max)
    sigma = covariance(cloud.rot, cloud.scale)
    sigma_b = rots @ sigma @ rots.transpose(0, 2, 1)
    return DeformedSplats(mu_prime=mapped, sigma_prime=sigma_b, source=cloud)


@dataclass
class Benchmark:
    name: str
    job: DeformJob
    target_mask: object
    iou_target: float


def _default_view(width, height):
    return CameraView(elevation=0.0, azimuth=0.0, radius=4.0, fov_y=45.0,
                      width=width, height=height)


def make_translation_benchmark(n_splats=5000, image_size=256, seed=0,
                               cage_resolution=64, cage_vertices=400,
                               config=None, guidance="mock") -> Benchmark:
    cloud = sphere_cloud(n_splats, seed=seed)
    view = _default_view(image_size, image_size)
    # world-space shift that moves the silhouette by 10% of the image width
    fx, _, _, _ = view.intrinsics()
    shift_px = 0.1 * view.width
    shift_world = shift_px * view.radius / fx
    _, rot_wc = view.basis()
    offset = shift_world * rot_wc[0]  # camera right axis

    shifted = SplatCloud.from_arrays(
        cloud.mu + offset, cloud.scale, cloud.rot, cloud.opacity, cloud.color
    )
    target = render_silhouette(shifted, view)

    cage = build_cage(cloud.mu, resolution=cage_resolution, offset_cells=4.0,
                      target_vertices=cage_vertices, padding=0.35)
    cfg = config or OptimConfig(seed=seed)
    job = DeformJob(
        cloud=cloud, cage=cage, sketch_view=view, target_mask=target, config=cfg,
        guidance=MockGuidanceClient() if guidance == "mock" else guidance,
    )
    return Benchmark(name="translation", job=job, target_mask=target, iou_target=0.95)


def make_bending_benchmark(n_splats=5000, image_size=256, seed=0, angle_deg=30.0,
                           cage_resolution=64, cage_vertices=400,
                           config=None, guidance="mock") -> Benchmark:
    cloud = capsule_cloud(n_splats, seed=seed)
    view = _default_view(image_size, image_size)
    bent = bent_cloud(cloud, angle_deg, z_min=-1.15, z_max=1.15)
    target = render_silhouette(bent, view)

    cage = build_cage(cloud.mu, resolution=cage_resolution, offset_cells=4.0,
                      target_vertices=cage_vertices, padding=0.35)
    cfg = config or OptimConfig(seed=seed)
    job = DeformJob(
        cloud=cloud, cage=cage, sketch_view=view, target_mask=target, config=cfg,
        guidance=MockGuidanceClient() if guidance == "mock" else guidance,
    )
    return Benchmark(name="bending", job=job, target_mask=target, iou_target=0.85)


def mask_iou(a, b, threshold=0.5):
    aa = (a.pixels if hasattr(a, "pixels") else a) > threshold
    bb = (b.pixels if hasattr(b, "pixels") else b) > threshold
    union = np.logical_or(aa, bb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(aa, bb).sum() / union)


def run_benchmark(bench: Benchmark, stop_at_iou=None, **run_kwargs):
    """Run to completion or until the target IoU is reached (if requested)."""
    early = None
    if stop_at_iou is not None:
        def early(metrics):
            return mask_iou(metrics["mask"], bench.target_mask) > stop_at_iou
    result = run(bench.job, early_stop=early, **run_kwargs)
    iou = mask_iou(result.final_mask, bench.target_mask)
    return result, iou


MAKERS = {
    "translation": make_translation_benchmark,
    "bending": make_bending_benchmark,
}


def run_ablation(benchmark="bending", parameterizations=("decomposed", "jacobian", "vertices"),
                 seeds=(0, 1, 2), n_splats=2000, image_size=128, iterations=600,
                 cage_vertices=250, progress=None):
    """Final silhouette loss per (parameterization, seed); one CSV row each."""
    rows = []
    for param in parameterizations:
        for seed in seeds:
            cfg = OptimConfig(iterations=iterations, seed=int(seed), parameterization=param)
            bench = MAKERS[benchmark](
                n_splats=n_splats, image_size=image_size, seed=int(seed),
                cage_vertices=cage_vertices, config=cfg,
            )
            result, iou = run_benchmark(bench)
            l_sil = result.loss_history[-1][1]
            rows.append(
                {
                    "benchmark": benchmark,
                    "parameterization": param,
                    "seed": int(seed),
                    "iterations": result.iterations_run,
                    "final_l_sil": l_sil,
                    "final_iou": iou,
                    "flipped_faces": result.flipped_faces,
                }
            )
            if progress is not None:
                progress(rows[-1])
    return rows
