"""Batch-mode driver: convert, cage, deform, animate, render, ablate, serve.

Every command validates its inputs and exits with code 2 and a single
machine-parseable line ``error: <ErrorType>: <detail>`` on stderr for
domain errors; unexpected failures exit 1.
"""

import csv as csv_mod
import json
import os
import sys

import click
import numpy as np

from .errors import EngineError

DEFAULTS_ECHO = "iterations={iterations} lr={learning_rate} alpha={alpha} views={num_random_views}"


def _fail(err, code=2):
    click.echo(f"error: {type(err).__name__}: {err}", err=True)
    sys.exit(code)


def _load_config_file(path):
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


@click.group()
def main():
    """Cage-based deformation of Gaussian-splat scenes from silhouette sketches."""


@main.command()
@click.option("--mesh", "mesh_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", default=5000, show_default=True, help="Number of surface samples")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True)
@click.option("--opacity", default=0.9, show_default=True)
def convert(mesh_path, samples, out_path, seed, opacity):
    """Fit oriented isotropic splats to surface samples of an OBJ mesh."""
    from .cage import load_obj
    from .geometry import face_normals_areas, sample_mesh_surface
    from .splats import SplatCloud, matrix_to_quat, save_ply

    try:
        mesh = load_obj(mesh_path)
        _, areas = face_normals_areas(mesh.vertices, mesh.faces)
        rng = np.random.default_rng(seed)
        pts, normals = sample_mesh_surface(mesh.vertices, mesh.faces, samples, rng)
        sigma = 1.8 * np.sqrt(areas.sum() / samples / np.pi)

        # orient the short axis along the surface normal
        z = normals
        helper = np.where(np.abs(z[:, 2:3]) < 0.9, [[0.0, 0, 1]], [[1.0, 0, 0]])
        x = np.cross(helper, z)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        y = np.cross(z, x)
        rots = matrix_to_quat(np.stack([x, y, z], axis=-1))

        color = 0.5 * (normals + 1.0)  # orientation-coded colors
        dc = (color - 0.5) / 0.28209479177387814
        cloud = SplatCloud.from_arrays(
            mu=pts,
            scale=np.column_stack([np.full(samples, sigma), np.full(samples, sigma),
                                   np.full(samples, 0.3 * sigma)]),
            rot=rots,
            opacity=np.full(samples, opacity),
            color=dc,
        )
        save_ply(cloud, out_path)
    except (EngineError, ValueError, OSError) as e:
        _fail(e)
    click.echo(f"wrote {samples} splats to {out_path}")


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--res", default=96, show_default=True, help="Distance grid resolution per axis")
@click.option("--offset-cells", default=4.0, show_default=True, help="Iso-level in grid cells")
@click.option("--verts", default=500, show_default=True, help="Target cage vertex count")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cage(in_path, res, offset_cells, verts, out_path):
    """Build an enclosing cage mesh for a splat scene."""
    from .cage import build_cage, save_obj
    from .splats import load_ply

    try:
        cloud = load_ply(in_path)
        mesh = build_cage(cloud.mu, resolution=res, offset_cells=offset_cells,
                          target_vertices=verts, padding=0.35)
        save_obj(mesh, out_path)
    except (EngineError, ValueError, OSError) as e:
        _fail(e)
    click.echo(f"cage: {mesh.n_vertices} vertices, {mesh.n_faces} faces -> {out_path}")


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cage", "cage_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--sketch", "sketch_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--elev", default=0.0, show_default=True)
@click.option("--azim", default=0.0, show_default=True)
@click.option("--radius", default=4.0, show_default=True)
@click.option("--fov", default=45.0, show_default=True)
@click.option("--iters", default=2000, show_default=True)
@click.option("--lr", default=0.002, show_default=True)
@click.option("--alpha", default=10000.0, show_default=True)
@click.option("--views", default=4, show_default=True, help="Random guidance views per iteration")
@click.option("--seed", default=0, show_default=True)
@click.option("--guidance", default="mock", show_default=True, help="mock | none | http(s) URL")
@click.option("--param", "parameterization", default="decomposed", show_default=True,
              type=click.Choice(["decomposed", "jacobian", "vertices"]))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="JSON job config; flags override file values")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def deform(scene_path, cage_path, sketch_path, elev, azim, radius, fov, iters, lr, alpha,
           views, seed, guidance, parameterization, config_path, out_dir):
    """Optimize a cage deformation toward a sketched silhouette."""
    from .cage import load_obj
    from .camera import CameraView
    from .guidance import make_client
    from .optimize import DeformJob, OptimConfig, run
    from .raster import load_mask_png, render_color, save_mask_png, save_rgb_png
    from .splats import load_ply, save_ply
    from .transport import export_deformed

    try:
        file_cfg = _load_config_file(config_path).get("config", {})
        ctx = click.get_current_context()
        flag_values = {
            "iterations": iters, "learning_rate": lr, "alpha": alpha,
            "num_random_views": views, "seed": seed, "parameterization": parameterization,
        }
        flag_names = {
            "iterations": "iters", "learning_rate": "lr", "alpha": "alpha",
            "num_random_views": "views", "seed": "seed", "parameterization": "parameterization",
        }
        merged = dict(file_cfg)
        for key, value in flag_values.items():
            src = ctx.get_parameter_source(flag_names[key])
            if key not in merged or src.name != "DEFAULT":
                merged[key] = value
        cfg = OptimConfig.from_json(merged)

        click.echo("config: " + DEFAULTS_ECHO.format(**cfg.to_json()) + f" seed={cfg.seed}")

        cloud = load_ply(scene_path)
        cage_mesh = load_obj(cage_path).validate()
        sketch = load_mask_png(sketch_path)
        view = CameraView(elevation=elev, azimuth=azim, radius=radius, fov_y=fov,
                          width=sketch.pixels.shape[1], height=sketch.pixels.shape[0]).validate()
        from scipy.ndimage import gaussian_filter
        from .raster import SilhouetteMask

        target = SilhouetteMask(np.clip(gaussian_filter(sketch.pixels, 1.0), 0, 1))
        job = DeformJob(cloud=cloud, cage=cage_mesh, sketch_view=view, target_mask=target,
                        config=cfg, guidance=make_client(guidance))

        os.makedirs(out_dir, exist_ok=True)
        last_echo = [0.0]

        def progress(it, metrics):
            import time as _t

            if _t.monotonic() - last_echo[0] > 2.0:
                click.echo(f"iter {it + 1}/{cfg.iterations} l_sil={metrics['l_sil']:.4f}")
                last_echo[0] = _t.monotonic()

        result = run(job, on_iteration=progress, checkpoint_dir=out_dir)
        save_ply(export_deformed(result.splats), os.path.join(out_dir, "deformed.ply"))
        save_mask_png(result.final_mask, os.path.join(out_dir, "final_mask.png"))
        img = render_color(result.splats, view)
        save_rgb_png(img[:, :, :3], os.path.join(out_dir, "final_render.png"))
        with open(os.path.join(out_dir, "loss.csv"), "w") as f:
            f.write(result.loss_csv())
        if result.params is not None:
            from .poisson import save_params

            save_params(result.params, os.path.join(out_dir, "final.params"))
    except (EngineError, ValueError, OSError) as e:
        _fail(e)
    click.echo(f"final l_sil={result.loss_history[-1][1]:.6f} -> {out_dir}")


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cage", "cage_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--jobs", "jobs_spec", required=True,
              help="Comma-separated .params checkpoints, in keyframe order")
@click.option("--fps", default=30.0, show_default=True)
@click.option("--duration", default=2.0, show_default=True)
@click.option("--elev", default=0.0)
@click.option("--azim", default=0.0)
@click.option("--radius", default=4.0)
@click.option("--size", default=512, show_default=True)
@click.option("--mode", default="decomposed", type=click.Choice(["decomposed", "vertices"]),
              show_default=True, help="Interpolation space")
@click.option("--ply/--no-ply", "write_ply", default=False, help="Also write per-frame PLY")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def animate(scene_path, cage_path, jobs_spec, fps, duration, elev, azim, radius, size, mode,
            write_ply, out_dir):
    """Interpolate between keyframe deformations and render frames."""
    from .anim import Keyframe, render_sequence, save_manifest
    from .cage import load_obj
    from .camera import CameraView
    from .coords import compute_tables
    from .poisson import build_poisson, load_params, params_to_transforms, solve_cage
    from .splats import load_ply

    try:
        cloud = load_ply(scene_path)
        cage_mesh = load_obj(cage_path).validate()
        system = build_poisson(cage_mesh)
        tables = compute_tables(cage_mesh, cloud.mu)
        paths = [p.strip() for p in jobs_spec.split(",") if p.strip()]
        keyframes = []
        times = np.linspace(0.0, 1.0, len(paths)) if len(paths) > 1 else [0.0]
        for t, p in zip(times, paths):
            params = load_params(p)
            cage_def = solve_cage(system, params_to_transforms(params))
            keyframes.append(Keyframe(time=float(t), params=params, cage_def=cage_def))
        view = CameraView(elevation=elev, azimuth=azim, radius=radius,
                          width=size, height=size).validate()
        frames = render_sequence(keyframes, fps, duration, out_dir, cloud, tables, system,
                                 view, mode=mode, write_ply=write_ply)
        save_manifest(os.path.join(out_dir, "manifest.json"),
                      [{"params": p, "time": float(t)} for p, t in zip(paths, times)],
                      fps, duration, mode)
    except (EngineError, ValueError, OSError) as e:
        _fail(e)
    click.echo(f"wrote {len(frames)} frames to {out_dir}")


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--elev", default=0.0, show_default=True)
@click.option("--azim", default=0.0, show_default=True)
@click.option("--radius", default=4.0, show_default=True)
@click.option("--fov", default=45.0, show_default=True)
@click.option("--w", default=512, show_default=True)
@click.option("--h", default=512, show_default=True)
@click.option("--mode", default="color", type=click.Choice(["color", "silhouette"]), show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def render(scene_path, elev, azim, radius, fov, w, h, mode, out_path):
    """Render one view of a splat scene to PNG."""
    from .camera import CameraView
    from .raster import render_color, render_silhouette, save_mask_png, save_rgb_png
    from .splats import load_ply

    try:
        cloud = load_ply(scene_path)
        view = CameraView(elevation=elev, azimuth=azim, radius=radius, fov_y=fov,
                          width=w, height=h).validate()
        if mode == "silhouette":
            save_mask_png(render_silhouette(cloud, view), out_path)
        else:
            img = render_color(cloud, view)
            save_rgb_png(img[:, :, :3], out_path)
    except (EngineError, ValueError, OSError) as e:
        _fail(e)
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--benchmark", default="bending", type=click.Choice(["bending", "translation"]),
              show_default=True)
@click.option("--param", "param", default="all",
              type=click.Choice(["all", "decomposed", "jacobian", "vertices"]), show_default=True)
@click.option("--seeds", default=3, show_default=True, help="Number of seeds (0..n-1)")
@click.option("--iters", default=600, show_default=True)
@click.option("--splats", default=2000, show_default=True)
@click.option("--size", default=128, show_default=True)
@click.option("--cage-verts", default=250, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def ablate(benchmark, param, seeds, iters, splats, size, cage_verts, out_path):
    """Compare cage parameterizations on a synthetic recovery benchmark."""
    from .benchmarks import run_ablation

    params = ("decomposed", "jacobian", "vertices") if param == "all" else (param,)
    try:
        rows = run_ablation(
            benchmark=benchmark, parameterizations=params, seeds=tuple(range(seeds)),
            n_splats=splats, image_size=size, iterations=iters, cage_vertices=cage_verts,
            progress=lambda r: click.echo(
                f"{r['benchmark']} {r['parameterization']} seed={r['seed']} "
                f"l_sil={r['final_l_sil']:.4f} iou={r['final_iou']:.3f} flipped={r['flipped_faces']}"
            ),
        )
        with open(out_path, "w", newline="") as f:
            writer = csv_mod.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    except (EngineError, ValueError, OSError) as e:
        _fail(e)
    click.echo(f"wrote {len(rows)} rows to {out_path}")


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--workspace", default=None, type=click.Path(file_okay=False))
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
def serve(config_path, workspace, host, port):
    """Start the local HTTP service for the browser UI."""
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = ServiceConfig.load(config_path)
    if workspace:
        cfg.workspace = workspace
    if host:
        cfg.host = host
    if port:
        cfg.port = port
    click.echo(f"serving on http://{cfg.host}:{cfg.port} (workspace: {cfg.workspace})")
    uvicorn.run(create_app(cfg), host=cfg.host, port=cfg.port)


if __name__ == "__main__":
    main()
