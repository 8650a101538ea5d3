"""Pinhole camera poses and random pose sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_FOV_Y = np.deg2rad(49.1)
MAX_ELEVATION = np.deg2rad(60.0)


def _vec3(v):
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return v


@dataclass(frozen=True)
class CameraPose:
    """Look-at pinhole camera.

    Camera space follows the OpenCV convention: +x right, +y down, +z
    along the viewing direction.
    """

    eye: np.ndarray
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_y: float = DEFAULT_FOV_Y
    width: int = 64
    height: int = 64

    def __post_init__(self):
        object.__setattr__(self, "eye", _vec3(self.eye))
        object.__setattr__(self, "target", _vec3(self.target))
        object.__setattr__(self, "up", _vec3(self.up))
        self.validate()

    def validate(self):
        forward = self.target - self.eye
        if not np.all(np.isfinite(forward)) or np.linalg.norm(forward) == 0:
            raise ConfigError("degenerate pose: eye coincides with target")
        f = forward / np.linalg.norm(forward)
        up = self.up / max(np.linalg.norm(self.up), 1e-300)
        if np.linalg.norm(np.cross(f, up)) < 1e-9:
            raise ConfigError("degenerate pose: up vector parallel to view direction")
        if not 0.0 < self.fov_y < np.pi:
            raise ConfigError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ConfigError("image resolution must be positive")

    @property
    def rotation(self):
        """World-to-camera rotation, rows are the camera axes in world space."""
        f = self.target - self.eye
        f = f / np.linalg.norm(f)
        right = np.cross(f, self.up)
        right /= np.linalg.norm(right)
        down = np.cross(f, right)
        return np.stack([right, down, f])

    @property
    def focal(self):
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    @property
    def principal_point(self):
        return 0.5 * self.width, 0.5 * self.height

    @property
    def direction(self):
        """Unit vector from target to eye."""
        d = self.eye - self.target
        return d / np.linalg.norm(d)

    def world_to_camera(self, points):
        return (np.asarray(points, dtype=np.float64) - self.eye) @ self.rotation.T

    def replace(self, **changes):
        values = dict(eye=self.eye, target=self.target, up=self.up, fov_y=self.fov_y,
                      width=self.width, height=self.height)
        values.update(changes)
        return CameraPose(**values)


def sample_poses(n, radius, seed=None, *, width=64, height=64, fov_y=DEFAULT_FOV_Y, rng=None):
    """Draw ``n`` look-at-origin poses on a sphere of ``radius``.

    Azimuth is uniform on [0, 2pi); elevation is area-uniform within
    [-60, +60] degrees. Pass either ``seed`` or a ``numpy.random.Generator``.
    """
    if int(n) < 1:
        raise ConfigError("n >= 1 poses required")
    if not radius > 0:
        raise ConfigError("radius must be positive")
    if rng is None:
        rng = np.random.default_rng(seed)
    azimuth = rng.uniform(0.0, 2.0 * np.pi, size=int(n))
    sin_lim = np.sin(MAX_ELEVATION)
    elevation = np.arcsin(rng.uniform(-sin_lim, sin_lim, size=int(n)))
    eyes = radius * np.stack([
        np.cos(elevation) * np.cos(azimuth),
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
    ], axis=1)
    return [CameraPose(eye=e, width=width, height=height, fov_y=fov_y) for e in eyes]


def azimuth_of(pose):
    x, y = pose.eye[0] - pose.target[0], pose.eye[1] - pose.target[1]
    return float(np.arctan2(y, x) % (2.0 * np.pi))
