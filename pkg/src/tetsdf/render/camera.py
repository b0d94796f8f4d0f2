"""Perspective camera: world -> camera -> NDC -> screen.

Camera space is right-handed with the aperture at the origin, +z pointing
into the scene, +x to the left and +y up. Screen space has its origin at the
top-left image corner, +x right and +y down, in pixel units. NDC depth runs
from 0 on the near plane to 1 on the far plane.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    R: np.ndarray
    T: np.ndarray
    near: float
    far: float
    fov: float  # vertical field of view, radians
    width: int
    height: int
    aspect: float | None = None  # W/H of the image plane; defaults to width/height

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if self.aspect is None:
            object.__setattr__(self, "aspect", self.width / self.height)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("camera R is not a rotation")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not 0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must have at least one pixel")

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), *, near=0.1, far=10.0,
                fov=math.radians(40.0), width=64, height=64) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(np.asarray(up, dtype=np.float64), z)
        if np.linalg.norm(x) < 1e-12:
            x = np.cross((1.0, 0.0, 0.0) if abs(z[0]) < 0.9 else (0.0, 0.0, 1.0), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye, near, far, fov, width, height)

    @property
    def focal(self) -> tuple[float, float]:
        """Focal lengths (fx, fy) in pixels."""
        t = math.tan(self.fov / 2.0)
        return self.width / (2.0 * t * self.aspect), self.height / (2.0 * t)

    @property
    def center(self) -> np.ndarray:
        """Camera aperture position in world space."""
        return -self.R.T @ self.T

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.T

    def ndc_depth(self, zc):
        n, f = self.near, self.far
        return (f * zc - f * n) / ((f - n) * zc)

    def camera_depth(self, z_ndc):
        """Invert :meth:`ndc_depth`: camera-space depth in meters."""
        n, f = self.near, self.far
        return f * n / (f - np.asarray(z_ndc) * (f - n))

    def project(self, points_c) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Screen ``x', y'``, NDC depth ``z'`` and camera depth ``z_c`` of
        camera-space points. No check for points behind the camera."""
        p = np.asarray(points_c, dtype=np.float64)
        fx, fy = self.focal
        zc = p[..., 2]
        xs = -fx * p[..., 0] / zc + self.width / 2.0
        ys = -fy * p[..., 1] / zc + self.height / 2.0
        return xs, ys, self.ndc_depth(zc), zc

    def pixel_rays(self) -> np.ndarray:
        """Camera-space ray directions (H, W, 3) through pixel centers, z = 1."""
        fx, fy = self.focal
        xs = np.arange(self.width) + 0.5
        ys = np.arange(self.height) + 0.5
        X, Y = np.meshgrid(xs, ys)
        d = np.empty((self.height, self.width, 3))
        d[..., 0] = (self.width / 2.0 - X) / fx
        d[..., 1] = (self.height / 2.0 - Y) / fy
        d[..., 2] = 1.0
        return d

    # the two factored matrices, kept for cross-checking the combined path
    def projection_matrix(self) -> np.ndarray:
        """Camera -> homogeneous NDC, with the physical near-plane size."""
        n, f = self.near, self.far
        h = 2.0 * n * math.tan(self.fov / 2.0)
        w = h * self.aspect
        return np.array([[2 * n / w, 0, 0, 0],
                         [0, 2 * n / h, 0, 0],
                         [0, 0, f / (f - n), -f * n / (f - n)],
                         [0, 0, 1, 0]])

    def screen_matrix(self) -> np.ndarray:
        """NDC -> screen, in pixel units."""
        W, H = self.width, self.height
        return np.array([[-W / 2, 0, 0, W / 2],
                         [0, -H / 2, 0, H / 2],
                         [0, 0, 1, 0],
                         [0, 0, 0, 1]], dtype=np.float64)

    def with_extrinsics(self, R, T) -> "Camera":
        return Camera(R, T, self.near, self.far, self.fov, self.width, self.height, self.aspect)

    def to_dict(self) -> dict:
        return {
            "rotation": Rotation.from_matrix(self.R).as_quat().tolist(),
            "translation": self.T.tolist(),
            "near": self.near, "far": self.far, "fov": self.fov, "aspect": self.aspect,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        R = Rotation.from_quat(np.asarray(d["rotation"], dtype=np.float64)).as_matrix()
        # round-trip through a quaternion leaves R orthonormal to ~1e-16
        return cls(R, d["translation"], float(d["near"]), float(d["far"]), float(d["fov"]),
                   int(d["width"]), int(d["height"]), d.get("aspect"))


def project_to_screen(v_c, cam: Camera) -> tuple[np.ndarray, float]:
    """Screen point ``(x', y', z')`` and camera depth ``z_c`` of one camera-space point."""
    v_c = np.asarray(v_c, dtype=np.float64)
    if v_c[2] <= 0:
        raise BehindCameraError("point is behind the camera (z_c <= 0)")
    xs, ys, zs, zc = cam.project(v_c)
    return np.array([xs, ys, zs]), float(zc)


def load_camera(path) -> Camera:
    with open(path) as f:
        return Camera.from_dict(json.load(f))


def save_camera(path, cam: Camera) -> None:
    with open(path, "w") as f:
        json.dump(cam.to_dict(), f, indent=2)


def orbit_cameras(n_views: int, radius: float = 3.0, elevation: float = 0.0, *, offset: float = 0.0,
                  **kwargs) -> list[Camera]:
    """``n_views`` cameras evenly spaced on a horizontal circle, looking at the origin."""
    cams = []
    for i in range(n_views):
        a = offset + 2 * math.pi * i / n_views
        eye = radius * np.array([math.sin(a) * math.cos(elevation), math.sin(elevation),
                                 math.cos(a) * math.cos(elevation)])
        cams.append(Camera.look_at(eye, **kwargs))
    return cams
