"""Orbit camera: (elevation, azimuth, radius) around a look-at point, z-up."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ViewInvalid


@dataclass(frozen=True)
class CameraView:
    elevation: float = 0.0   # degrees above the horizon
    azimuth: float = 0.0     # degrees around +z
    radius: float = 4.0      # world units
    fov_y: float = 45.0      # degrees, vertical
    width: int = 512
    height: int = 512
    look_at: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        if not (16 <= self.width <= 2048 and 16 <= self.height <= 2048):
            raise ViewInvalid(f"image size {self.width}x{self.height} outside [16, 2048]")
        if not (10.0 < self.fov_y < 120.0):
            raise ViewInvalid(f"fov_y {self.fov_y} outside (10, 120)")
        if not (self.radius > 0):
            raise ViewInvalid(f"radius {self.radius} must be positive")
        if not np.isfinite([self.elevation, self.azimuth, self.radius, self.fov_y]).all():
            raise ViewInvalid("non-finite view parameters")
        return self

    def with_size(self, width, height):
        return replace(self, width=int(width), height=int(height))

    def position(self):
        e = np.deg2rad(self.elevation)
        a = np.deg2rad(self.azimuth)
        d = np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
        return np.asarray(self.look_at, dtype=np.float64) + self.radius * d

    def basis(self):
        """(camera position, world->camera rotation with rows right/down/forward)."""
        pos = self.position()
        forward = np.asarray(self.look_at, dtype=np.float64) - pos
        forward /= np.linalg.norm(forward)
        up_world = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up_world) > 0.999:
            up_world = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up_world)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)  # completes a right-handed row basis
        return pos, np.stack([right, down, forward])

    def intrinsics(self):
        """fx, fy, cx, cy in pixels (square pixels, principal point centered)."""
        fy = 0.5 * self.height / np.tan(0.5 * np.deg2rad(self.fov_y))
        return fy, fy, 0.5 * self.width, 0.5 * self.height
