"""Gaussian primitives and the structure-of-arrays scene container."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterable, Optional

import numpy as np


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) quaternions in (w, x, y, z) order -> (..., 3, 3) rotations.

    Quaternions are normalized first, so non-unit input is accepted.
    """
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """(3, 3) rotation -> unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.asarray(q, dtype=float)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_from_two_vectors(a, b) -> np.ndarray:
    """Unit quaternion rotating direction ``a`` onto direction ``b``."""
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    c = np.dot(a, b)
    if c < -1 + 1e-12:
        axis = np.cross(a, [1.0, 0, 0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0, 1.0, 0])
        axis /= np.linalg.norm(axis)
        return np.array([0.0, *axis])
    q = np.array([1.0 + c, *np.cross(a, b)])
    return q / np.linalg.norm(q)


def smallest_axis(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """World-frame unit axis of each Gaussian's smallest scale (unsigned)."""
    R = quat_to_rotmat(quats)
    j = np.argmin(scales, axis=1)
    return R[np.arange(len(j)), :, j]


@dataclass
class GaussianPrimitive:
    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    scale: np.ndarray = field(default_factory=lambda: np.full(3, 0.01))
    opacity: float = 0.5
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    anchored: bool = False
    target_normal: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        self.rotation = q / np.linalg.norm(q)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be strictly positive")
        self.opacity = float(np.clip(self.opacity, 0.0, 1.0))
        self.color = np.clip(np.asarray(self.color, dtype=float).reshape(3), 0.0, 1.0)
        if self.target_normal is not None:
            n = np.asarray(self.target_normal, dtype=float).reshape(3)
            self.target_normal = n / np.linalg.norm(n)
        if self.anchored and self.target_normal is None:
            raise ValueError("anchored primitives need a target normal")


@dataclass
class GaussianScene:
    """A collection of Gaussians stored column-wise.

    ``target_normals`` is NaN for primitives without tactile supervision.
    """

    positions: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    anchored: np.ndarray = None
    target_normals: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.quats = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(n)
        self.colors = np.asarray(self.colors, dtype=float).reshape(n, 3)
        if self.anchored is None:
            self.anchored = np.zeros(n, dtype=bool)
        self.anchored = np.asarray(self.anchored, dtype=bool).reshape(n)
        if self.target_normals is None:
            self.target_normals = np.full((n, 3), np.nan)
        self.target_normals = np.asarray(self.target_normals, dtype=float).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_points(cls, points, colors, scales, opacity: float = 0.1) -> "GaussianScene":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(points)
        scales = np.broadcast_to(np.asarray(scales, dtype=float).reshape(-1, 1) if np.ndim(scales) == 1
                                 else np.asarray(scales, dtype=float), (n, 3)).copy()
        quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        return cls(points, quats, scales, np.full(n, opacity), np.asarray(colors, dtype=float).reshape(n, 3))

    @classmethod
    def from_primitives(cls, prims: Iterable[GaussianPrimitive]) -> "GaussianScene":
        prims = list(prims)
        if not prims:
            return cls.empty()
        tn = [p.target_normal if p.target_normal is not None else np.full(3, np.nan) for p in prims]
        return cls(
            np.stack([p.center for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.scale for p in prims]),
            np.array([p.opacity for p in prims]),
            np.stack([p.color for p in prims]),
            np.array([p.anchored for p in prims]),
            np.stack(tn),
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        tn = self.target_normals[i]
        return GaussianPrimitive(self.positions[i].copy(), self.quats[i].copy(), self.scales[i].copy(),
                                 float(self.opacities[i]), self.colors[i].copy(), bool(self.anchored[i]),
                                 None if np.any(np.isnan(tn)) else tn.copy())

    def copy(self) -> "GaussianScene":
        return GaussianScene(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(**{f.name: np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                                for f in fields(self)})

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "GaussianScene":
        """Rigidly move every primitive (center, orientation, target normal)."""
        out = self.copy()
        out.positions = self.positions @ R.T + t
        qR = rotmat_to_quat(R)
        out.quats = quat_multiply(qR, self.quats)
        out.target_normals = self.target_normals @ R.T
        return out

    def normals(self) -> np.ndarray:
        return smallest_axis(self.quats, self.scales)

    def validate(self, tol: float = 1e-6) -> None:
        if np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1) > tol):
            raise ValueError("quaternions are not unit length")
        if np.any(self.scales <= 0):
            raise ValueError("non-positive scale")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacity outside [0, 1]")
        if np.any((self.colors < 0) | (self.colors > 1)):
            raise ValueError("color outside [0, 1]")
        tn = self.target_normals[self.anchored]
        if np.any(np.isnan(tn)) or np.any(np.abs(np.linalg.norm(tn, axis=1) - 1) > 1e-6):
            raise ValueError("anchored primitive without a unit target normal")


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(np.broadcast_to(a, np.broadcast_shapes(a.shape, b.shape)), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.broadcast_to(b, np.broadcast_shapes(a.shape, b.shape)), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)
