"""External guidance contracts: plausibility gradients and sketch-to-image.

Two providers sit behind one client interface:

* ``sds_gradient``: given a render at a query view, a reference image, and the
  relative viewpoint, returns an image-space gradient nudging the render
  toward plausibility. Served over HTTP by a diffusion stack in production;
  the bundled mock returns a deterministic "stay natural" regularizer
  ``lam * (x - blur(x, sigma=2))`` which is NOT a learned model.
* ``sketch_to_reference``: turns (render, silhouette sketch) into a reference
  image whose silhouette matches the sketch. The mock warps the render with a
  thin-plate spline fitted boundary-to-boundary.

Wire format (POST /v1/sds, /v1/sketch2ref): JSON with base64 payloads. Images
travel as PNG; the SDS response gradient is signed, so it travels as raw
little-endian float32 instead of PNG.
"""

import base64
import io
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .errors import BadResponse, ServiceUnavailable

MOCK_SDS_LAMBDA = 0.01
MOCK_SDS_BLUR_SIGMA = 2.0
MAX_IMAGE_DIM = 2048
RETRY_DELAYS = (0.5, 1.0, 2.0)


@dataclass
class GuidanceRequest:
    rendered_image: np.ndarray   # (H, W) or (H, W, 3) in [0, 1]
    reference_image: np.ndarray  # same layout
    delta_elev: float = 0.0
    delta_azim: float = 0.0
    prompt: str = ""
    timestep_seed: int = 0

    def validate(self):
        r = np.asarray(self.rendered_image)
        f = np.asarray(self.reference_image)
        if r.shape != f.shape:
            raise BadResponse(f"image shape mismatch: {r.shape} vs {f.shape}")
        if max(r.shape[0], r.shape[1]) > MAX_IMAGE_DIM:
            raise BadResponse(f"image exceeds {MAX_IMAGE_DIM}px")
        if not (np.isfinite(self.delta_elev) and np.isfinite(self.delta_azim)):
            raise BadResponse("non-finite viewpoint deltas")
        return self


@dataclass
class GuidanceResponse:
    grad_image: np.ndarray  # same shape as the request's rendered image
    scale: float = 1.0


# ---------------------------------------------------------------------------
# deterministic local mock


class MockGuidanceClient:
    """Stand-in provider: deterministic, dependency-free, NOT a diffusion model."""

    def __init__(self, lam=MOCK_SDS_LAMBDA, blur_sigma=MOCK_SDS_BLUR_SIGMA):
        self.lam = lam
        self.blur_sigma = blur_sigma

    def sds_gradient(self, req: GuidanceRequest) -> GuidanceResponse:
        from scipy.ndimage import gaussian_filter

        req.validate()
        x = np.asarray(req.rendered_image, dtype=np.float64)
        sigma = (self.blur_sigma,) * 2 + (0,) * (x.ndim - 2)
        grad = self.lam * (x - gaussian_filter(x, sigma=sigma))
        return GuidanceResponse(grad_image=grad, scale=1.0)

    def sketch_to_reference(self, render, sketch, prompt=""):
        render = np.asarray(render, dtype=np.float64)
        sketch = np.asarray(sketch, dtype=np.float64)
        if max(render.shape[0], render.shape[1]) > MAX_IMAGE_DIM:
            raise BadResponse(f"image exceeds {MAX_IMAGE_DIM}px")
        if render.shape[:2] != sketch.shape[:2]:
            raise BadResponse("render and sketch dimensions differ")
        return tps_warp_to_sketch(render, sketch)


def _longest_contour(mask):
    from skimage import measure

    contours = measure.find_contours(np.asarray(mask, dtype=np.float64), 0.5)
    if not contours:
        return None
    return max(contours, key=len)


def _resample_closed(contour, k):
    """Arc-length resampling of a closed (N, 2) contour to k points."""
    pts = np.asarray(contour)
    if np.any(pts[0] != pts[-1]):
        pts = np.vstack([pts, pts[0]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        return np.tile(pts[0], (k, 1))
    targets = np.linspace(0.0, total, k, endpoint=False)
    out = np.empty((k, 2))
    for d in range(2):
        out[:, d] = np.interp(targets, s, pts[:, d])
    return out


def _align_cyclic(src, dst):
    """Cyclic shift + direction of src minimizing centered distance to dst.

    Matching on centroid-subtracted contours removes the translation bias,
    so point correspondence reflects shape, not displacement.
    """
    src_c = src - src.mean(axis=0)
    dst_c = dst - dst.mean(axis=0)
    k = len(src)
    best = None
    for cand, cand_c in ((src, src_c), (src[::-1], src_c[::-1])):
        for shift in range(k):
            rolled_c = np.roll(cand_c, -shift, axis=0)
            cost = np.sum((rolled_c - dst_c) ** 2)
            if best is None or cost < best[0]:
                best = (cost, np.roll(cand, -shift, axis=0))
    return best[1]


def render_foreground_mask(render, threshold=0.02):
    r = np.asarray(render)
    if r.ndim == 2:
        return (r > threshold).astype(np.float64)
    return (r.max(axis=2) > threshold).astype(np.float64)


def tps_warp_to_sketch(render, sketch, n_boundary=64):
    """Warp `render` so its silhouette boundary lands on the sketch boundary."""
    from scipy.interpolate import RBFInterpolator
    from scipy.ndimage import map_coordinates

    src_contour = _longest_contour(render_foreground_mask(render))
    dst_contour = _longest_contour(sketch)
    if src_contour is None or dst_contour is None:
        return render.copy()

    src = _resample_closed(src_contour, n_boundary)
    dst = _resample_closed(dst_contour, n_boundary)
    src = _align_cyclic(src, dst)

    # inverse map: where in the source does each target-boundary point come from
    tps = RBFInterpolator(dst, src, kernel="thin_plate_spline", smoothing=1e-10)
    h, w = sketch.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([ys.ravel() + 0.0, xs.ravel() + 0.0], axis=1)
    coords = tps(grid).T.reshape(2, h, w)

    if render.ndim == 2:
        return map_coordinates(render, coords, order=1, mode="constant")
    out = np.empty_like(render)
    for c in range(render.shape[2]):
        out[:, :, c] = map_coordinates(render[:, :, c], coords, order=1, mode="constant")
    return out


# ---------------------------------------------------------------------------
# wire format


def _png_b64(img):
    from PIL import Image

    arr = np.asarray(img, dtype=np.float64)
    data = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(data, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_png(s):
    from PIL import Image

    img = Image.open(io.BytesIO(base64.b64decode(s)))
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def _f32_b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _b64_f32(s, shape):
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float64)


def encode_sds_request(req: GuidanceRequest) -> dict:
    r = np.asarray(req.rendered_image)
    return {
        "width": int(r.shape[1]),
        "height": int(r.shape[0]),
        "channels": 1 if r.ndim == 2 else int(r.shape[2]),
        "delta_elev": float(req.delta_elev),
        "delta_azim": float(req.delta_azim),
        "prompt": req.prompt,
        "timestep_seed": int(req.timestep_seed),
        "rendered_png": _png_b64(req.rendered_image),
        "reference_png": _png_b64(req.reference_image),
    }


def decode_sds_request(body: dict) -> GuidanceRequest:
    try:
        rendered = _b64_png(body["rendered_png"])
        reference = _b64_png(body["reference_png"])
        return GuidanceRequest(
            rendered_image=rendered,
            reference_image=reference,
            delta_elev=float(body["delta_elev"]),
            delta_azim=float(body["delta_azim"]),
            prompt=body.get("prompt", ""),
            timestep_seed=int(body.get("timestep_seed", 0)),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise BadResponse(f"malformed SDS request: {e}")


def encode_sds_response(resp: GuidanceResponse) -> dict:
    g = np.asarray(resp.grad_image)
    return {
        "width": int(g.shape[1]),
        "height": int(g.shape[0]),
        "channels": 1 if g.ndim == 2 else int(g.shape[2]),
        "scale": float(resp.scale),
        "grad_f32": _f32_b64(g),
    }


def decode_sds_response(body: dict) -> GuidanceResponse:
    try:
        ch = int(body["channels"])
        shape = (int(body["height"]), int(body["width"])) + (() if ch == 1 else (ch,))
        grad = _b64_f32(body["grad_f32"], shape)
        if not np.isfinite(grad).all():
            raise BadResponse("non-finite gradient values")
        return GuidanceResponse(grad_image=grad, scale=float(body["scale"]))
    except (KeyError, ValueError, TypeError) as e:
        raise BadResponse(f"malformed SDS response: {e}")


# ---------------------------------------------------------------------------
# HTTP client with retry policy


class HttpGuidanceClient:
    """POSTs the wire format to /v1/sds and /v1/sketch2ref with retries."""

    def __init__(self, base_url, timeout=30.0, transport=None, sleep=time.sleep):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._sleep = sleep

    def close(self):
        self._client.close()

    def _post(self, path, body):
        import httpx

        last = None
        for attempt, delay in enumerate(RETRY_DELAYS):
            try:
                resp = self._client.post(self.base_url + path, json=body)
                if resp.status_code != 200:
                    raise BadResponse(f"{path} returned HTTP {resp.status_code}")
                return resp.json()
            except (httpx.TransportError, httpx.TimeoutException) as e:
                last = e
                self._sleep(delay)
        raise ServiceUnavailable(f"{path} unreachable after {len(RETRY_DELAYS)} attempts: {last}")

    def sds_gradient(self, req: GuidanceRequest) -> GuidanceResponse:
        req.validate()
        body = self._post("/v1/sds", encode_sds_request(req))
        resp = decode_sds_response(body)
        if np.asarray(resp.grad_image).shape != np.asarray(req.rendered_image).shape:
            raise BadResponse("gradient dimensions do not match the request")
        return resp

    def sketch_to_reference(self, render, sketch, prompt=""):
        render = np.asarray(render, dtype=np.float64)
        if max(render.shape[0], render.shape[1]) > MAX_IMAGE_DIM:
            raise BadResponse(f"image exceeds {MAX_IMAGE_DIM}px")
        body = {
            "width": int(render.shape[1]),
            "height": int(render.shape[0]),
            "prompt": prompt,
            "render_png": _png_b64(render),
            "sketch_png": _png_b64(sketch),
        }
        out = self._post("/v1/sketch2ref", body)
        try:
            return _b64_png(out["image_png"])
        except (KeyError, ValueError) as e:
            raise BadResponse(f"malformed sketch2ref response: {e}")


def make_client(spec, timeout=None):
    """'mock' or an http(s) URL; env vars override file-configured values."""
    spec = os.environ.get("SPLATCAGE_GUIDANCE_URL", spec)
    timeout = float(os.environ.get("SPLATCAGE_GUIDANCE_TIMEOUT", timeout or 30.0))
    if spec is None or spec == "none":
        return None
    if spec == "mock":
        return MockGuidanceClient()
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpGuidanceClient(spec, timeout=timeout)
    raise ValueError(f"unknown guidance spec: {spec!r}")


def mock_app():
    """FastAPI app serving the mock provider over the documented wire format."""
    from fastapi import FastAPI, Request

    app = FastAPI(title="splatcage mock guidance")
    client = MockGuidanceClient()

    @app.post("/v1/sds")
    async def sds(request: Request):
        body = await request.json()
        req = decode_sds_request(body)
        return encode_sds_response(client.sds_gradient(req))

    @app.post("/v1/sketch2ref")
    async def sketch2ref(request: Request):
        body = await request.json()
        render = _b64_png(body["render_png"])
        sketch = _b64_png(body["sketch_png"])
        out = client.sketch_to_reference(render, sketch, body.get("prompt", ""))
        return {"image_png": _png_b64(out)}

    return app
