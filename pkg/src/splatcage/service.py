"""Local HTTP service exposing the engine to the browser UI.

Single-process FastAPI app over a filesystem workspace: scenes and cages are
content-addressed, jobs run one at a time on a background worker thread, and
job progress is readable without blocking the optimizer (each iteration
publishes an immutable snapshot dict). Restarting the service keeps all
on-disk artifacts; jobs that were mid-flight come back as failed("restart").
"""

import base64
import hashlib
import io
import json
import os
import queue
import threading
import time
import uuid
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .anim import Keyframe, render_sequence
from .cage import build_cage, load_obj, save_obj, sdf_grid, extract_cage
from .camera import CameraView
from .coords import compute_tables
from .errors import Cancelled, EngineError
from .guidance import make_client
from .optimize import DeformJob, OptimConfig, run
from .poisson import JacobianParams, build_poisson, load_params, params_to_transforms, save_params, solve_cage
from .raster import SilhouetteMask, render_color, render_silhouette, save_mask_png, save_rgb_png
from .splats import load_ply, save_ply
from .transport import export_deformed, transport


@dataclass
class ServiceConfig:
    workspace: str = "./splatcage-workspace"
    host: str = "127.0.0.1"
    port: int = 8000

    @staticmethod
    def load(path=None):
        cfg = ServiceConfig()
        if path and os.path.exists(path):
            with open(path) as f:
                doc = json.load(f)
            for k in ("workspace", "host", "port"):
                if k in doc:
                    setattr(cfg, k, doc[k])
        cfg.workspace = os.environ.get("SPLATCAGE_WORKSPACE", cfg.workspace)
        cfg.host = os.environ.get("SPLATCAGE_HOST", cfg.host)
        cfg.port = int(os.environ.get("SPLATCAGE_PORT", cfg.port))
        return cfg


def _hash_bytes(data) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


class Workspace:
    """Content-addressed on-disk store for scenes, cages, jobs, animations."""

    def __init__(self, root):
        self.root = root
        for sub in ("scenes", "cages", "jobs", "animations"):
            os.makedirs(os.path.join(root, sub), exist_ok=True)

    def scene_dir(self, sid):
        return os.path.join(self.root, "scenes", sid)

    def cage_dir(self, cid):
        return os.path.join(self.root, "cages", cid)

    def job_dir(self, jid):
        return os.path.join(self.root, "jobs", jid)

    def add_scene(self, data: bytes) -> str:
        sid = _hash_bytes(data)
        d = self.scene_dir(sid)
        os.makedirs(d, exist_ok=True)
        path = os.path.join(d, "scene.ply")
        if not os.path.exists(path):
            with open(path, "wb") as f:
                f.write(data)
        return sid

    def scene_path(self, sid):
        path = os.path.join(self.scene_dir(sid), "scene.ply")
        return path if os.path.exists(path) else None

    def add_cage(self, mesh, params: dict) -> str:
        blob = mesh.vertices.tobytes() + mesh.faces.tobytes()
        cid = _hash_bytes(blob)
        d = self.cage_dir(cid)
        os.makedirs(d, exist_ok=True)
        save_obj(mesh, os.path.join(d, "cage.obj"))
        with open(os.path.join(d, "meta.json"), "w") as f:
            json.dump(params, f)
        return cid

    def cage_path(self, cid):
        path = os.path.join(self.cage_dir(cid), "cage.obj")
        return path if os.path.exists(path) else None

    def list_job_records(self):
        out = []
        jobs_root = os.path.join(self.root, "jobs")
        for jid in sorted(os.listdir(jobs_root)):
            rec = self.read_job_record(jid)
            if rec is not None:
                out.append(rec)
        return out

    def read_job_record(self, jid):
        path = os.path.join(self.job_dir(jid), "record.json")
        if not os.path.exists(path):
            return None
        with open(path) as f:
            return json.load(f)

    def write_job_record(self, record):
        d = self.job_dir(record["id"])
        os.makedirs(d, exist_ok=True)
        tmp = os.path.join(d, "record.json.tmp")
        with open(tmp, "w") as f:
            json.dump(record, f, indent=2)
        os.replace(tmp, os.path.join(d, "record.json"))


_TERMINAL = {"done", "failed", "cancelled"}


class JobManager:
    """One running job at a time; queue depth one; snapshot-style progress."""

    def __init__(self, workspace: Workspace):
        self.ws = workspace
        self.records = {}
        self.cancel_flags = {}
        self._lock = threading.Lock()
        self._queue = queue.Queue(maxsize=1)
        self._active = threading.Semaphore(1)
        # jobs interrupted by a previous shutdown
        for rec in self.ws.list_job_records():
            if rec["status"] in ("queued", "running"):
                rec["status"] = "failed"
                rec["error"] = "restart"
                self.ws.write_job_record(rec)
            self.records[rec["id"]] = rec
        self._worker = threading.Thread(target=self._loop, daemon=True)
        self._worker.start()

    def find_by_request_key(self, key):
        if not key:
            return None
        with self._lock:
            for rec in self.records.values():
                if rec.get("request_key") == key:
                    return rec
        return None

    def busy(self):
        return not self._queue.empty() or self._active._value == 0

    def submit(self, record, job_factory):
        with self._lock:
            self.records[record["id"]] = record
            self.cancel_flags[record["id"]] = threading.Event()
        self.ws.write_job_record(record)
        self._queue.put_nowait((record["id"], job_factory))

    def cancel(self, jid):
        with self._lock:
            flag = self.cancel_flags.get(jid)
            rec = self.records.get(jid)
        if flag is not None:
            flag.set()
        if rec is not None and rec["status"] == "queued":
            self._update(jid, status="cancelled")

    def get(self, jid):
        with self._lock:
            return self.records.get(jid)

    def all_records(self):
        with self._lock:
            return sorted(self.records.values(), key=lambda r: r.get("created", 0))

    def _update(self, jid, **changes):
        with self._lock:
            rec = dict(self.records[jid])
            if rec["status"] in _TERMINAL and changes.get("status") not in _TERMINAL:
                return rec
            rec.update(changes)
            self.records[jid] = rec
        self.ws.write_job_record(rec)
        return rec

    def _loop(self):
        while True:
            jid, factory = self._queue.get()
            with self._lock:
                rec = self.records.get(jid)
            if rec is None or rec["status"] == "cancelled":
                self._queue.task_done()
                continue
            self._active.acquire()
            try:
                self._run_one(jid, factory)
            finally:
                self._active.release()
                self._queue.task_done()

    def _run_one(self, jid, factory):
        flag = self.cancel_flags[jid]
        self._update(jid, status="running")
        try:
            job, finalize = factory()
            total = job.config.iterations

            def on_iteration(it, metrics):
                if it % 5 == 0 or it == total - 1:
                    self._update(
                        jid,
                        progress={"iteration": it + 1, "total": total},
                        loss={
                            "l_sil": metrics["l_sil"],
                            "l_guidance": metrics["l_guidance"],
                            "l_total": metrics["l_total"],
                        },
                        flipped_faces=metrics["flipped_faces"],
                    )

            result = run(
                job,
                should_stop=flag.is_set,
                on_iteration=on_iteration,
                checkpoint_dir=self.ws.job_dir(jid),
            )
            artifacts = finalize(result)
            self._update(
                jid,
                status="done",
                progress={"iteration": result.iterations_run, "total": total},
                artifacts=artifacts,
            )
        except Cancelled:
            self._update(jid, status="cancelled")
        except Exception as e:  # surface engine errors in the record
            self._update(jid, status="failed", error=f"{type(e).__name__}: {e}")


def create_app(config: ServiceConfig = None):
    from fastapi import FastAPI, HTTPException, Request, Response
    from fastapi.middleware.cors import CORSMiddleware

    config = config or ServiceConfig.load()
    ws = Workspace(config.workspace)
    manager = JobManager(ws)
    app = FastAPI(title="splatcage service")
    app.state.workspace = ws
    app.state.manager = manager
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    scene_cache = {}

    def get_scene(sid):
        if sid not in scene_cache:
            path = ws.scene_path(sid)
            if path is None:
                raise HTTPException(404, f"unknown scene {sid}")
            scene_cache[sid] = load_ply(path)
        return scene_cache[sid]

    def get_cage(cid):
        path = ws.cage_path(cid)
        if path is None:
            raise HTTPException(404, f"unknown cage {cid}")
        return load_obj(path)

    @app.post("/scenes")
    async def post_scene(request: Request):
        ctype = request.headers.get("content-type", "")
        if ctype.startswith("application/json"):
            body = await request.json()
            path = body.get("path")
            if not path or not os.path.exists(path):
                raise HTTPException(422, f"scene path not found: {path}")
            with open(path, "rb") as f:
                data = f.read()
        else:
            data = await request.body()
        try:
            sid = ws.add_scene(data)
            cloud = load_ply(ws.scene_path(sid))
        except (EngineError, OSError) as e:
            raise HTTPException(422, f"invalid PLY: {e}")
        scene_cache[sid] = cloud
        lo = cloud.mu.min(axis=0)
        hi = cloud.mu.max(axis=0)
        return {
            "scene_id": sid,
            "count": cloud.count,
            "bbox": {"min": lo.tolist(), "max": hi.tolist()},
            "suggested_radius": float(2.5 * np.linalg.norm(hi - lo) / 2 + 1e-9),
            "center": ((lo + hi) / 2).tolist(),
        }

    @app.get("/scenes/{sid}/render")
    def render_scene(sid: str, elev: float = 0.0, azim: float = 0.0, radius: float = 4.0,
                     w: int = 512, h: int = 512, fov: float = 45.0, mode: str = "color",
                     cx: float = 0.0, cy: float = 0.0, cz: float = 0.0):
        cloud = get_scene(sid)
        try:
            view = CameraView(elevation=elev, azimuth=azim, radius=radius, fov_y=fov,
                              width=w, height=h, look_at=(cx, cy, cz)).validate()
        except EngineError as e:
            raise HTTPException(422, str(e))
        buf = io.BytesIO()
        from PIL import Image

        if mode == "silhouette":
            mask = render_silhouette(cloud, view)
            Image.fromarray(np.round(mask.pixels * 255).astype(np.uint8), "L").save(buf, "PNG")
        else:
            img = render_color(cloud, view)
            Image.fromarray(np.round(np.clip(img[:, :, :3], 0, 1) * 255).astype(np.uint8), "RGB").save(buf, "PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/scenes/{sid}/cage")
    def post_cage(sid: str, body: dict):
        cloud = get_scene(sid)
        resolution = int(body.get("resolution", 96))
        target_vertices = int(body.get("target_vertices", 500))
        try:
            if "offset" in body:
                grid = sdf_grid(cloud.mu, resolution=resolution, padding=0.35)
                mesh = extract_cage(grid, float(body["offset"]), target_vertices)
            else:
                mesh = build_cage(
                    cloud.mu, resolution=resolution,
                    offset_cells=float(body.get("offset_cells", 4.0)),
                    target_vertices=target_vertices, padding=0.35,
                )
        except (EngineError, ValueError) as e:
            raise HTTPException(422, f"cage construction failed: {e}")
        cid = ws.add_cage(mesh, {"scene": sid, **body})
        return {
            "cage_id": cid,
            "vertices": mesh.n_vertices,
            "faces": mesh.n_faces,
            "obj_url": f"/cages/{cid}/cage.obj",
        }

    @app.get("/cages/{cid}/cage.obj")
    def get_cage_obj(cid: str):
        path = ws.cage_path(cid)
        if path is None:
            raise HTTPException(404, f"unknown cage {cid}")
        with open(path, "rb") as f:
            return Response(content=f.read(), media_type="text/plain")

    @app.post("/jobs")
    def post_job(body: dict):
        key = body.get("request_key")
        existing = manager.find_by_request_key(key)
        if existing is not None:
            return {"job_id": existing["id"], "status": existing["status"]}
        if manager.busy():
            raise HTTPException(409, "a job is already running")

        sid = body.get("scene")
        cid = body.get("cage")
        cloud = get_scene(sid)
        cage = get_cage(cid)
        view_body = body.get("view", {})
        try:
            view = CameraView(
                elevation=float(view_body.get("elev", 0.0)),
                azimuth=float(view_body.get("azim", 0.0)),
                radius=float(view_body.get("radius", 4.0)),
                fov_y=float(view_body.get("fov", 45.0)),
                width=int(view_body.get("w", 512)),
                height=int(view_body.get("h", 512)),
                look_at=tuple(view_body.get("look_at", (0.0, 0.0, 0.0))),
            ).validate()
            cfg = OptimConfig.from_json({**body.get("config", {})})
        except (EngineError, ValueError, TypeError) as e:
            raise HTTPException(422, str(e))
        try:
            sketch_png = base64.b64decode(body["sketch_png"])
            from PIL import Image

            sketch = np.asarray(Image.open(io.BytesIO(sketch_png)).convert("L"), dtype=np.float64) / 255.0
        except (KeyError, ValueError, OSError) as e:
            raise HTTPException(422, f"bad sketch payload: {e}")
        if sketch.shape != (view.height, view.width):
            raise HTTPException(422, f"sketch {sketch.shape} does not match view {(view.height, view.width)}")

        guidance_spec = body.get("guidance", "none")
        jid = uuid.uuid4().hex[:12]
        jdir = ws.job_dir(jid)
        os.makedirs(jdir, exist_ok=True)
        save_mask_png(SilhouetteMask(sketch), os.path.join(jdir, "sketch.png"))

        record = {
            "id": jid,
            "status": "queued",
            "created": time.time(),
            "scene": sid,
            "cage": cid,
            "view": {"elev": view.elevation, "azim": view.azimuth, "radius": view.radius,
                     "fov": view.fov_y, "w": view.width, "h": view.height,
                     "look_at": list(view.look_at)},
            "config": cfg.to_json(),
            "progress": {"iteration": 0, "total": cfg.iterations},
            "loss": None,
            "artifacts": {},
            "request_key": key,
        }

        def factory():
            from scipy.ndimage import gaussian_filter

            target = SilhouetteMask(np.clip(gaussian_filter(sketch, sigma=1.0), 0.0, 1.0))
            job = DeformJob(
                cloud=cloud, cage=cage, sketch_view=view, target_mask=target,
                config=cfg, guidance=make_client(guidance_spec),
            )

            def finalize(result):
                out = os.path.join(jdir, "result")
                os.makedirs(out, exist_ok=True)
                save_ply(export_deformed(result.splats), os.path.join(out, "deformed.ply"))
                save_mask_png(result.final_mask, os.path.join(out, "final_mask.png"))
                img = render_color(result.splats, view)
                save_rgb_png(img[:, :, :3], os.path.join(out, "final_render.png"))
                before = render_color(cloud, view)
                save_rgb_png(before[:, :, :3], os.path.join(out, "before_render.png"))
                with open(os.path.join(out, "loss.csv"), "w") as f:
                    f.write(result.loss_csv())
                if result.params is not None:
                    save_params(result.params, os.path.join(out, "final.params"))
                names = ["deformed.ply", "final_mask.png", "final_render.png",
                         "before_render.png", "loss.csv"]
                if result.params is not None:
                    names.append("final.params")
                return {n: f"/jobs/{jid}/artifacts/{n}" for n in names}

            return job, finalize

        manager.submit(record, factory)
        return {"job_id": jid, "status": "queued"}

    @app.get("/jobs")
    def list_jobs():
        return {"jobs": manager.all_records()}

    @app.get("/jobs/{jid}")
    def get_job(jid: str):
        rec = manager.get(jid)
        if rec is None:
            raise HTTPException(404, f"unknown job {jid}")
        return rec

    @app.get("/jobs/{jid}/result")
    def get_result(jid: str):
        rec = manager.get(jid)
        if rec is None:
            raise HTTPException(404, f"unknown job {jid}")
        if rec["status"] != "done":
            raise HTTPException(409, f"job is {rec['status']}, not done")
        return {"job_id": jid, "artifacts": rec["artifacts"]}

    @app.get("/jobs/{jid}/artifacts/{name}")
    def get_artifact(jid: str, name: str):
        if "/" in name or ".." in name:
            raise HTTPException(404, "no such artifact")
        path = os.path.join(ws.job_dir(jid), "result", name)
        if not os.path.exists(path):
            raise HTTPException(404, "no such artifact")
        media = {
            ".png": "image/png", ".csv": "text/csv", ".ply": "application/octet-stream",
            ".params": "application/octet-stream",
        }.get(os.path.splitext(name)[1], "application/octet-stream")
        with open(path, "rb") as f:
            return Response(content=f.read(), media_type=media)

    @app.post("/jobs/{jid}/cancel")
    def cancel_job(jid: str):
        rec = manager.get(jid)
        if rec is None:
            raise HTTPException(404, f"unknown job {jid}")
        manager.cancel(jid)
        return manager.get(jid)

    @app.post("/animations")
    def post_animation(body: dict):
        job_ids = body.get("jobs", [])
        fps = float(body.get("fps", 30.0))
        duration = float(body.get("duration", 2.0))
        times = body.get("times")
        if len(job_ids) < 2:
            raise HTTPException(422, "need at least 2 completed jobs")
        records = []
        for jid in job_ids:
            rec = manager.get(jid)
            if rec is None or rec["status"] != "done":
                raise HTTPException(422, f"job {jid} is not done")
            records.append(rec)
        cages = {r["cage"] for r in records}
        if len(cages) != 1:
            raise HTTPException(422, "all keyframe jobs must share one cage")
        scenes = {r["scene"] for r in records}
        if len(scenes) != 1:
            raise HTTPException(422, "all keyframe jobs must share one scene")

        cage = get_cage(records[0]["cage"])
        cloud = get_scene(records[0]["scene"])
        system = build_poisson(cage)
        tables = compute_tables(cage, cloud.mu)
        if times is None:
            times = list(np.linspace(0.0, 1.0, len(records)))
        keyframes = []
        for rec, t in zip(records, times):
            params = load_params(os.path.join(ws.job_dir(rec["id"]), "result", "final.params"))
            cage_def = solve_cage(system, params_to_transforms(params))
            keyframes.append(Keyframe(time=float(t), params=params, cage_def=cage_def))

        vb = records[0]["view"]
        view = CameraView(elevation=vb["elev"], azimuth=vb["azim"], radius=vb["radius"],
                          fov_y=vb["fov"], width=vb["w"], height=vb["h"],
                          look_at=tuple(vb.get("look_at", (0, 0, 0))))
        anim_id = uuid.uuid4().hex[:12]
        out_dir = os.path.join(ws.root, "animations", anim_id)
        frames = render_sequence(keyframes, fps, duration, out_dir, cloud, tables, system, view)

        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
            for fp in frames:
                zf.write(fp, arcname=os.path.basename(fp))
        return Response(
            content=buf.getvalue(),
            media_type="application/zip",
            headers={"X-Animation-Id": anim_id, "X-Frame-Count": str(len(frames))},
        )

    return app


def main(config_path=None):
    import uvicorn

    config = ServiceConfig.load(config_path)
    uvicorn.run(create_app(config), host=config.host, port=config.port)
