"""Keyframe animation over deformation results.

Keyframes carry the per-face parameters of finished deform jobs plus their
solved cages. In-between cages interpolate in the decomposed transform space
(per-face quaternion slerp of the rotation, linear stretch) followed by a
Poisson re-solve, which avoids the volume collapse linear vertex blending
shows under rotation. A plain vertex-lerp mode ships as a flagged fallback
for comparison.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .cage import DeformedCage
from .errors import InsufficientKeyframes, MismatchedCages
from .poisson import (
    JacobianParams,
    PoissonSystem,
    matrix_to_rot6,
    params_to_transforms,
    rot6_to_matrix,
    solve_cage,
    stretch6_to_matrix,
    matrix_to_stretch6,
)


@dataclass
class Keyframe:
    time: float                 # in [0, 1]
    params: JacobianParams
    cage_def: DeformedCage

    def n_faces(self):
        return self.params.n_faces


def _check_pair(k0: Keyframe, k1: Keyframe):
    if k0.cage_def.rest is not k1.cage_def.rest and not (
        k0.cage_def.rest.faces.shape == k1.cage_def.rest.faces.shape
        and np.array_equal(k0.cage_def.rest.faces, k1.cage_def.rest.faces)
        and np.allclose(k0.cage_def.rest.vertices, k1.cage_def.rest.vertices)
    ):
        raise MismatchedCages("keyframes do not share a rest cage")


def interpolate_params(k0: Keyframe, k1: Keyframe, s: float) -> JacobianParams:
    """Shortest-path slerp of rotations, linear stretch, per face."""
    r0 = rot6_to_matrix(k0.params.rot6)
    r1 = rot6_to_matrix(k1.params.rot6)
    rot0 = Rotation.from_matrix(r0)
    rot1 = Rotation.from_matrix(r1)
    rel = rot1 * rot0.inv()
    rs = Rotation.from_rotvec(rel.as_rotvec() * s) * rot0
    rot6 = matrix_to_rot6(rs.as_matrix())

    s0 = stretch6_to_matrix(k0.params.stretch6)
    s1 = stretch6_to_matrix(k1.params.stretch6)
    stretch6 = matrix_to_stretch6((1.0 - s) * s0 + s * s1)
    return JacobianParams(rot6, stretch6)


def interpolate(k0: Keyframe, k1: Keyframe, s: float, system: PoissonSystem,
                mode="decomposed") -> DeformedCage:
    """Cage at blend parameter s in [0, 1] between two keyframes."""
    _check_pair(k0, k1)
    if mode == "vertices":
        v = (1.0 - s) * k0.cage_def.vertices + s * k1.cage_def.vertices
        return DeformedCage(rest=k0.cage_def.rest, vertices=v)
    if s == 0.0:
        return k0.cage_def
    if s == 1.0:
        return k1.cage_def
    params = interpolate_params(k0, k1, s)
    return solve_cage(system, params_to_transforms(params))


def frame_times(fps, duration):
    n = max(int(round(fps * duration)), 1)
    if n == 1:
        return np.array([0.0])
    return np.linspace(0.0, 1.0, n)


def cage_at_time(keyframes, t, system, mode="decomposed"):
    """Piecewise interpolation across an ordered keyframe sequence."""
    times = [k.time for k in keyframes]
    if t <= times[0]:
        return keyframes[0].cage_def
    if t >= times[-1]:
        return keyframes[-1].cage_def
    hi = int(np.searchsorted(times, t, side="right"))
    k0, k1 = keyframes[hi - 1], keyframes[hi]
    s = (t - k0.time) / (k1.time - k0.time)
    return interpolate(k0, k1, s, system, mode=mode)


def render_sequence(keyframes, fps, duration, out_dir, cloud, tables, system,
                    view, mode="decomposed", write_ply=False, background=(0, 0, 0)):
    """Interpolate, transport, and render numbered frames (frame_%05d.png)."""
    from .raster import render_color, save_rgb_png
    from .splats import save_ply
    from .transport import export_deformed, transport

    keyframes = sorted(keyframes, key=lambda k: k.time)
    if len(keyframes) < 2:
        raise InsufficientKeyframes(f"need >= 2 keyframes, got {len(keyframes)}")
    times = [k.time for k in keyframes]
    if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
        raise ValueError("keyframe times must be strictly increasing")
    for k in keyframes[1:]:
        _check_pair(keyframes[0], k)

    os.makedirs(out_dir, exist_ok=True)
    frames = []
    for i, t in enumerate(frame_times(fps, duration)):
        cage_def = cage_at_time(keyframes, float(t), system, mode=mode)
        deformed = transport(cloud, tables, cage_def)
        img = render_color(deformed, view, background=background)
        path = os.path.join(out_dir, f"frame_{i:05d}.png")
        save_rgb_png(img[:, :, :3], path)
        frames.append(path)
        if write_ply:
            save_ply(export_deformed(deformed), os.path.join(out_dir, f"frame_{i:05d}.ply"))
    return frames


def save_manifest(path, keyframe_entries, fps, duration, mode="decomposed"):
    """Sequence manifest: ordered job ids and times behind a frame set."""
    with open(path, "w") as f:
        json.dump(
            {"keyframes": keyframe_entries, "fps": fps, "duration": duration, "mode": mode},
            f,
            indent=2,
        )


def load_manifest(path):
    with open(path) as f:
        return json.load(f)
