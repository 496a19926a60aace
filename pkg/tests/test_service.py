import base64
import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from splatcage.benchmarks import sphere_cloud
from splatcage.service import ServiceConfig, Workspace, create_app
from splatcage.splats import save_ply


def wait_for(client, jid, timeout=120.0):
    t0 = time.time()
    while time.time() - t0 < timeout:
        rec = client.get(f"/jobs/{jid}").json()
        if rec["status"] in ("done", "failed", "cancelled"):
            return rec
        time.sleep(0.05)
    raise TimeoutError(f"job {jid} did not finish; last: {rec}")


def png_bytes(mask):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(mask, 0, 1) * 255).astype(np.uint8), "L").save(buf, "PNG")
    return buf.getvalue()


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    ws = tmp_path_factory.mktemp("workspace")
    app = create_app(ServiceConfig(workspace=str(ws)))
    with TestClient(app) as client:
        yield client, ws


@pytest.fixture(scope="module")
def scene_id(service, tmp_path_factory):
    client, _ = service
    cloud = sphere_cloud(300, seed=2)
    path = tmp_path_factory.mktemp("scene") / "scene.ply"
    save_ply(cloud, path)
    resp = client.post("/scenes", json={"path": str(path)})
    assert resp.status_code == 200
    return resp.json()["scene_id"]


@pytest.fixture(scope="module")
def cage_id(service, scene_id):
    client, _ = service
    resp = client.post(
        f"/scenes/{scene_id}/cage",
        json={"resolution": 32, "target_vertices": 120},
    )
    assert resp.status_code == 200
    body = resp.json()
    assert 100 <= body["vertices"] <= 140
    return body["cage_id"]


def submit_job(client, scene_id, cage_id, sketch, size=32, iterations=8, key=None, guidance="none"):
    return client.post(
        "/jobs",
        json={
            "scene": scene_id,
            "cage": cage_id,
            "sketch_png": base64.b64encode(png_bytes(sketch)).decode(),
            "view": {"elev": 0.0, "azim": 0.0, "radius": 4.0, "fov": 45.0, "w": size, "h": size},
            "config": {"iterations": iterations, "num_random_views": 0},
            "guidance": guidance,
            "request_key": key,
        },
    )


class TestScenes:
    def test_invalid_ply_422(self, service, tmp_path):
        client, _ = service
        bad = tmp_path / "bad.ply"
        bad.write_bytes(b"garbage")
        resp = client.post("/scenes", json={"path": str(bad)})
        assert resp.status_code == 422

    def test_upload_bytes(self, service, tmp_path):
        client, _ = service
        cloud = sphere_cloud(50, seed=3)
        path = tmp_path / "up.ply"
        save_ply(cloud, path)
        resp = client.post(
            "/scenes", content=path.read_bytes(),
            headers={"content-type": "application/octet-stream"},
        )
        assert resp.status_code == 200
        assert resp.json()["count"] == 50

    def test_render_png(self, service, scene_id):
        client, _ = service
        resp = client.get(f"/scenes/{scene_id}/render", params={"w": 48, "h": 40, "radius": 4.0})
        assert resp.status_code == 200
        from PIL import Image

        img = Image.open(io.BytesIO(resp.content))
        assert img.size == (48, 40)
        assert np.asarray(img).max() > 0  # something rendered

    def test_render_silhouette_mode(self, service, scene_id):
        client, _ = service
        resp = client.get(
            f"/scenes/{scene_id}/render",
            params={"w": 32, "h": 32, "mode": "silhouette", "radius": 4.0},
        )
        from PIL import Image

        img = Image.open(io.BytesIO(resp.content))
        assert img.mode == "L"

    def test_unknown_scene_404(self, service):
        client, _ = service
        assert client.get("/scenes/nope/render").status_code == 404

    def test_bad_view_422(self, service, scene_id):
        client, _ = service
        resp = client.get(f"/scenes/{scene_id}/render", params={"w": 4, "h": 4})
        assert resp.status_code == 422


class TestCages:
    def test_obj_download(self, service, cage_id):
        client, _ = service
        resp = client.get(f"/cages/{cage_id}/cage.obj")
        assert resp.status_code == 200
        assert resp.text.startswith("#") or resp.text.startswith("v")


class TestJobs:
    def test_fixed_point_job(self, service, scene_id, cage_id):
        client, _ = service
        size = 32
        sil = client.get(
            f"/scenes/{scene_id}/render",
            params={"w": size, "h": size, "mode": "silhouette", "radius": 4.0},
        )
        from PIL import Image

        sketch = np.asarray(Image.open(io.BytesIO(sil.content)), dtype=np.float64) / 255.0
        resp = submit_job(client, scene_id, cage_id, sketch, size=size, iterations=8)
        assert resp.status_code == 200
        jid = resp.json()["job_id"]
        rec = wait_for(client, jid)
        assert rec["status"] == "done", rec.get("error")
        # final loss no worse than the start
        result = client.get(f"/jobs/{jid}/result").json()
        csv_text = client.get(result["artifacts"]["loss.csv"]).text
        rows = [line.split(",") for line in csv_text.strip().splitlines()[1:]]
        assert float(rows[-1][1]) <= float(rows[0][1]) + 1e-12
        # artifacts exist
        assert client.get(result["artifacts"]["deformed.ply"]).status_code == 200
        assert client.get(result["artifacts"]["final_render.png"]).status_code == 200

    def test_sketch_dimension_mismatch_422(self, service, scene_id, cage_id):
        client, _ = service
        resp = submit_job(client, scene_id, cage_id, np.zeros((16, 16)), size=32)
        assert resp.status_code == 422

    def test_second_job_409(self, service, scene_id, cage_id):
        client, _ = service
        sketch = np.zeros((32, 32))
        sketch[10:20, 10:20] = 1.0
        r1 = submit_job(client, scene_id, cage_id, sketch, iterations=40)
        assert r1.status_code == 200
        r2 = submit_job(client, scene_id, cage_id, sketch, iterations=5)
        assert r2.status_code == 409
        wait_for(client, r1.json()["job_id"])

    def test_request_key_idempotent(self, service, scene_id, cage_id):
        client, _ = service
        sketch = np.zeros((32, 32))
        sketch[8:24, 8:24] = 1.0
        r1 = submit_job(client, scene_id, cage_id, sketch, iterations=5, key="abc123")
        jid = r1.json()["job_id"]
        wait_for(client, jid)
        r2 = submit_job(client, scene_id, cage_id, sketch, iterations=5, key="abc123")
        assert r2.status_code == 200
        assert r2.json()["job_id"] == jid

    def test_cancel(self, service, scene_id, cage_id):
        client, _ = service
        sketch = np.zeros((32, 32))
        sketch[4:28, 4:28] = 1.0
        r = submit_job(client, scene_id, cage_id, sketch, iterations=5000)
        jid = r.json()["job_id"]
        time.sleep(0.3)
        client.post(f"/jobs/{jid}/cancel")
        rec = wait_for(client, jid)
        assert rec["status"] == "cancelled"

    def test_result_conflict_when_running(self, service, scene_id, cage_id):
        client, _ = service
        sketch = np.zeros((32, 32))
        sketch[4:28, 4:28] = 1.0
        r = submit_job(client, scene_id, cage_id, sketch, iterations=2000)
        jid = r.json()["job_id"]
        resp = client.get(f"/jobs/{jid}/result")
        assert resp.status_code == 409
        client.post(f"/jobs/{jid}/cancel")
        wait_for(client, jid)

    def test_unknown_job_404(self, service):
        client, _ = service
        assert client.get("/jobs/zzz").status_code == 404


class TestRestart:
    def test_running_jobs_fail_on_restart(self, tmp_path):
        ws = Workspace(str(tmp_path))
        ws.write_job_record({"id": "j1", "status": "running", "created": 0})
        ws.write_job_record({"id": "j2", "status": "done", "created": 1, "artifacts": {}})
        app = create_app(ServiceConfig(workspace=str(tmp_path)))
        with TestClient(app) as client:
            r1 = client.get("/jobs/j1").json()
            assert r1["status"] == "failed"
            assert r1["error"] == "restart"
            assert client.get("/jobs/j2").json()["status"] == "done"


class TestAnimations:
    @pytest.mark.slow
    def test_animation_zip(self, service, scene_id, cage_id):
        client, _ = service
        size = 32
        sil = client.get(
            f"/scenes/{scene_id}/render",
            params={"w": size, "h": size, "mode": "silhouette", "radius": 4.0},
        )
        from PIL import Image

        sketch = np.asarray(Image.open(io.BytesIO(sil.content)), dtype=np.float64) / 255.0
        jids = []
        for i in range(2):
            r = submit_job(client, scene_id, cage_id, sketch, size=size, iterations=4,
                           key=f"anim-{i}")
            jid = r.json()["job_id"]
            rec = wait_for(client, jid)
            assert rec["status"] == "done", rec.get("error")
            jids.append(jid)
        resp = client.post("/animations", json={"jobs": jids, "fps": 5, "duration": 1.0})
        assert resp.status_code == 200
        import zipfile

        zf = zipfile.ZipFile(io.BytesIO(resp.content))
        assert len(zf.namelist()) == 5
        assert "frame_00000.png" in zf.namelist()

    def test_animation_needs_two_jobs(self, service):
        client, _ = service
        resp = client.post("/animations", json={"jobs": ["only-one"], "fps": 10, "duration": 1})
        assert resp.status_code == 422
