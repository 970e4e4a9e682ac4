"""Rigid transforms and the pinhole camera model.

Conventions: poses map world -> camera (``x_cam = R @ x_world + t``), camera
looks down +z, image x to the right and y down (OpenCV). Pixel ``(u, v)`` has
its center at integer coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R @ R.T - np.eye(3)).max() <= tol and np.linalg.det(R) > 0)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not is_rotation(R):
            raise ValueError("pose rotation is not orthonormal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        if M.shape != (4, 4) or not np.allclose(M[3], [0, 0, 0, 1]):
            raise ValueError("expected a 4x4 homogeneous rigid transform")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.R.T + self.t

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.R.T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other`` (apply ``other`` first)."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World->camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Pose(R, -R @ eye)


@dataclass(frozen=True)
class CameraView:
    pose: Pose
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near clip must be smaller than far clip")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @classmethod
    def from_fov(cls, pose: Pose, width: int, height: int, fov_x_deg: float, **kw) -> "CameraView":
        f = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(pose, f, f, (width - 1) / 2, (height - 1) / 2, width, height, **kw)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.pose.R.T @ self.pose.t

    def resized(self, width: int, height: int) -> "CameraView":
        sx, sy = width / self.width, height / self.height
        return CameraView(self.pose, self.fx * sx, self.fy * sy,
                          (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
                          width, height, self.near, self.far, self.name)

    def project(self, X: np.ndarray):
        """World points -> (pixel coords (N, 2), camera depth (N,))."""
        Xc = self.pose.apply(X)
        z = Xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * Xc[..., 0] / z + self.cx
            v = self.fy * Xc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def pixel_rays(self, stride: int = 1):
        """Unit ray directions (world) through pixel centers, plus the per-ray
        cosine to the optical axis (to convert ray distance into z-depth)."""
        v, u = np.mgrid[0:self.height:stride, 0:self.width:stride]
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], -1)
        norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
        d_cam = d_cam / norm
        return d_cam @ self.pose.R, d_cam[..., 2]

    def backproject(self, depth: np.ndarray, stride: int = 1):
        """Lift a z-depth image to world points; returns (points, (rows, cols))."""
        v, u = np.mgrid[0:self.height:stride, 0:self.width:stride]
        z = depth[::stride, ::stride]
        ok = np.isfinite(z) & (z > 0)
        u, v, z = u[ok], v[ok], z[ok]
        Xc = np.stack([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z], -1)
        return self.pose.inverse().apply(Xc), (v, u)
