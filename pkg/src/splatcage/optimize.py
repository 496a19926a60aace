"""Loss assembly and the Adam loop driving the cage parameters.

Per iteration: parameters -> per-face transforms -> Poisson solve -> splat
transport -> silhouette render at the sketch view (weighted squared-pixel
loss against the target mask) plus guidance gradients from freshly sampled
random views; everything backpropagates through the module adjoints down to
the parameter arrays, which Adam updates.
"""

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraView
from .coords import compute_tables
from .errors import Cancelled, DimensionMismatch, NaNDetected
from .guidance import GuidanceRequest
from .poisson import PARAMETERIZATIONS, JacobianParams, build_poisson, save_params
from .raster import (
    SilhouetteMask,
    color_adjoint,
    render_color_ctx,
    render_silhouette_ctx,
    silhouette_adjoint,
)
from .transport import transport, transport_adjoint
from .validation import check_finite, check_mask


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 2000
    learning_rate: float = 0.002
    alpha: float = 10000.0       # weight of the silhouette term
    num_random_views: int = 4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    parameterization: str = "decomposed"
    guidance_mode: str = "silhouette"  # what the guidance provider sees

    def validate(self):
        if self.iterations <= 0 or self.learning_rate <= 0:
            raise ValueError("iterations and learning_rate must be positive")
        if self.alpha < 0 or self.num_random_views < 0:
            raise ValueError("alpha and num_random_views must be non-negative")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        return self

    def to_json(self):
        d = self.__dict__.copy()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @staticmethod
    def from_json(d):
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return OptimConfig(**d).validate()


@dataclass
class DeformJob:
    """One optimization problem: fixed scene, cage, target, and config."""

    cloud: object             # SplatCloud
    cage: object              # CageMesh
    sketch_view: CameraView
    target_mask: SilhouetteMask
    config: OptimConfig = field(default_factory=OptimConfig)
    guidance: object = None   # client with sds_gradient(), or None

    tables: object = None
    system: object = None

    def prepare(self):
        self.config.validate()
        self.sketch_view.validate()
        target = check_mask(
            self.target_mask.pixels if isinstance(self.target_mask, SilhouetteMask) else self.target_mask,
            "target_mask",
        )
        if target.shape != (self.sketch_view.height, self.sketch_view.width):
            raise DimensionMismatch(
                f"target mask {target.shape} vs view {(self.sketch_view.height, self.sketch_view.width)}"
            )
        self.target_mask = SilhouetteMask(target)
        if self.tables is None:
            self.tables = compute_tables(self.cage, self.cloud.mu)
        if self.system is None:
            self.system = build_poisson(self.cage)
        return self


@dataclass
class DeformResult:
    param_arrays: list
    parameterization: str
    cage_def: object
    splats: object            # DeformedSplats
    loss_history: list        # rows of (iteration, l_sil, l_guidance, l_total)
    final_mask: SilhouetteMask
    flipped_faces: int
    iterations_run: int

    @property
    def params(self) -> JacobianParams | None:
        if self.parameterization == "decomposed":
            return JacobianParams(self.param_arrays[0], self.param_arrays[1])
        return None

    def loss_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["iteration", "l_sil", "l_guidance", "l_total"])
        writer.writerows(self.loss_history)
        return buf.getvalue()


def silhouette_loss(rendered: SilhouetteMask, target: SilhouetteMask) -> float:
    """Sum of squared pixel differences (not the mean)."""
    r = rendered.pixels if isinstance(rendered, SilhouetteMask) else rendered
    t = target.pixels if isinstance(target, SilhouetteMask) else target
    if r.shape != t.shape:
        raise DimensionMismatch(f"rendered {r.shape} vs target {t.shape}")
    diff = r - t
    return float(np.sum(diff * diff))


def silhouette_loss_grad(rendered, target):
    r = rendered.pixels if isinstance(rendered, SilhouetteMask) else rendered
    t = target.pixels if isinstance(target, SilhouetteMask) else target
    return 2.0 * (r - t)


def sample_views(sketch_view: CameraView, n, seed):
    """Azimuth uniform on [0, 360), elevation uniform on [-10, 45] degrees."""
    rng = np.random.default_rng(seed)
    views = []
    for _ in range(max(0, int(n))):
        azim = float(rng.uniform(0.0, 360.0))
        elev = float(rng.uniform(-10.0, 45.0))
        views.append(replace(sketch_view, elevation=elev, azimuth=azim))
    return views


def _forward_backward(job: DeformJob, arrays, iteration, rng_seed):
    """One full gradient evaluation. Returns (grads, metrics)."""
    cfg = job.config
    parameterization = PARAMETERIZATIONS[cfg.parameterization](job.system)

    for i, arr in enumerate(arrays):
        check_finite(arr, f"params[{i}]")
    cage_def = parameterization.forward(arrays)
    check_finite(cage_def.vertices, "cage_vertices")
    deformed = transport(job.cloud, job.tables, cage_def)
    check_finite(deformed.mu_prime, "mu_prime")
    check_finite(deformed.sigma_prime, "sigma_prime")

    grad_mu = np.zeros_like(deformed.mu_prime)
    grad_sigma = np.zeros_like(deformed.sigma_prime)

    # silhouette term at the sketch view
    mask, ctx = render_silhouette_ctx(deformed, job.sketch_view)
    l_sil = silhouette_loss(mask, job.target_mask)
    if cfg.alpha > 0 and ctx is not None:
        upstream = cfg.alpha * silhouette_loss_grad(mask, job.target_mask)
        g_mu, g_sigma = silhouette_adjoint(ctx, upstream)
        grad_mu += g_mu
        grad_sigma += g_sigma

    # guidance term from freshly sampled views
    l_guidance = 0.0
    if job.guidance is not None and cfg.num_random_views > 0:
        views = sample_views(job.sketch_view, cfg.num_random_views, rng_seed)
        reference = job.target_mask.pixels if cfg.guidance_mode == "silhouette" else None
        for vi, view in enumerate(views):
            if cfg.guidance_mode == "silhouette":
                vmask, vctx = render_silhouette_ctx(deformed, view)
                if vctx is None:
                    continue
                req = GuidanceRequest(
                    rendered_image=vmask.pixels,
                    reference_image=reference,
                    delta_elev=view.elevation - job.sketch_view.elevation,
                    delta_azim=view.azimuth - job.sketch_view.azimuth,
                    timestep_seed=int(rng_seed) + vi,
                )
                resp = job.guidance.sds_gradient(req)
                grad_img = resp.scale * np.asarray(resp.grad_image)
                check_finite(grad_img, "guidance_gradient")
                l_guidance += float(np.mean(np.abs(grad_img)))
                g_mu, g_sigma = silhouette_adjoint(vctx, grad_img)
            else:
                img, vctx = render_color_ctx(deformed, view)
                if vctx is None:
                    continue
                req = GuidanceRequest(
                    rendered_image=img[:, :, :3],
                    reference_image=np.zeros_like(img[:, :, :3]),
                    delta_elev=view.elevation - job.sketch_view.elevation,
                    delta_azim=view.azimuth - job.sketch_view.azimuth,
                    timestep_seed=int(rng_seed) + vi,
                )
                resp = job.guidance.sds_gradient(req)
                grad_img = resp.scale * np.asarray(resp.grad_image)
                check_finite(grad_img, "guidance_gradient")
                l_guidance += float(np.mean(np.abs(grad_img)))
                g_mu, g_sigma = color_adjoint(vctx, grad_img)
            grad_mu += g_mu
            grad_sigma += g_sigma

    vertex_grad = transport_adjoint(job.cloud, job.tables, cage_def, grad_mu, grad_sigma)
    check_finite(vertex_grad, "vertex_grad")
    grads = parameterization.adjoint(arrays, vertex_grad)
    for i, g in enumerate(grads):
        check_finite(g, f"grads[{i}]")

    flipped = int(cage_def.flipped_faces().sum())
    metrics = {
        "l_sil": l_sil,
        "l_guidance": l_guidance,
        "l_total": cfg.alpha * l_sil + l_guidance,
        "mask": mask,
        "cage_def": cage_def,
        "deformed": deformed,
        "flipped_faces": flipped,
    }
    return grads, metrics


def total_gradient(job: DeformJob, arrays, iteration=0):
    """Gradient of the weighted total loss w.r.t. the parameter arrays."""
    seed_seq = np.random.SeedSequence(entropy=job.config.seed, spawn_key=(iteration,))
    grads, _ = _forward_backward(job, arrays, iteration, seed_seq.generate_state(1)[0])
    return grads


class Adam:
    def __init__(self, arrays, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def run(job: DeformJob, should_stop=None, on_iteration=None, early_stop=None,
        checkpoint_dir=None, checkpoint_every=100) -> DeformResult:
    """Full optimization. Deterministic for a fixed seed and thread count.

    should_stop: polled between iterations; True raises Cancelled.
    early_stop: called with the per-iteration metrics; True ends the run
        successfully (used by benchmarks that only need a threshold).
    """
    job.prepare()
    cfg = job.config
    parameterization = PARAMETERIZATIONS[cfg.parameterization](job.system)
    arrays = parameterization.initial()
    adam = Adam(arrays, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
    seeds = np.random.SeedSequence(entropy=cfg.seed)

    history = []
    metrics = None
    iterations_run = 0
    for it in range(cfg.iterations):
        if should_stop is not None and should_stop():
            raise Cancelled(f"cancelled at iteration {it}")
        view_seed = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(it,)).generate_state(1)[0]
        grads, metrics = _forward_backward(job, arrays, it, view_seed)
        history.append((it, metrics["l_sil"], metrics["l_guidance"], metrics["l_total"]))
        adam.step(arrays, grads)
        iterations_run = it + 1
        if checkpoint_dir is not None and (it + 1) % checkpoint_every == 0 and cfg.parameterization == "decomposed":
            save_params(JacobianParams(arrays[0], arrays[1]), f"{checkpoint_dir}/checkpoint_{it + 1:06d}.params")
        if on_iteration is not None:
            on_iteration(it, metrics)
        if early_stop is not None and early_stop(metrics):
            break

    # final evaluation with the updated parameters
    cage_def = parameterization.forward(arrays)
    deformed = transport(job.cloud, job.tables, cage_def)
    mask, _ = render_silhouette_ctx(deformed, job.sketch_view)
    return DeformResult(
        param_arrays=arrays,
        parameterization=cfg.parameterization,
        cage_def=cage_def,
        splats=deformed,
        loss_history=history,
        final_mask=mask,
        flipped_faces=int(cage_def.flipped_faces().sum()),
        iterations_run=iterations_run,
    )


def save_job_config(path, config: OptimConfig, paths=None):
    """Job config as a documented JSON file: OptimConfig fields + input paths."""
    doc = {"config": config.to_json(), "paths": paths or {}}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def load_job_config(path):
    with open(path) as f:
        doc = json.load(f)
    return OptimConfig.from_json(doc.get("config", {})), doc.get("paths", {})
