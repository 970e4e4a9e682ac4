"""Synthetic ground truth: meshes, a textured room, raycast views, simulated
touches and dataset generation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numba import njit
from scipy import ndimage

from .camera import CameraView, Pose, look_at
from .tactile import ReflectanceModel, SensorSpec, TactileFrame, TactilePatch

log = logging.getLogger(__name__)

MATERIALS = ("lambertian", "dark", "mirror-like", "transparent-proxy")
SHAPES = ("sphere", "box", "cylinder", "bunny")


# meshes ----------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def is_watertight(self) -> bool:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        directed = {tuple(x) for x in e.tolist()}
        if len(directed) != len(e):
            return False
        return all((b, a) in directed for a, b in directed)

    def transformed(self, scale: float = 1.0, offset=(0.0, 0.0, 0.0)) -> "Mesh":
        return Mesh(self.vertices * scale + np.asarray(offset), self.faces.copy())

    def bounds(self):
        return self.vertices.min(0), self.vertices.max(0)


def icosphere(subdiv: int = 3) -> Mesh:
    t = (1 + 5**0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11),
         (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdiv):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return Mesh(np.array(verts), np.array(faces))


def sphere_mesh(radius: float = 0.05, subdiv: int = 4) -> Mesh:
    m = icosphere(subdiv)
    return Mesh(m.vertices * radius, m.faces)


def box_mesh(size=(0.08, 0.06, 0.07)) -> Mesh:
    h = np.asarray(size, dtype=float) / 2
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * h
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
         (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return Mesh(v, f)


def cylinder_mesh(radius: float = 0.04, height: float = 0.08, segments: int = 48) -> Mesh:
    a = 2 * np.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(a), radius * np.sin(a)])
    lo = np.column_stack([ring, np.full(segments, -height / 2)])
    hi = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.vstack([lo, hi, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    f = []
    for i in range(segments):
        j = (i + 1) % segments
        f += [(i, j, segments + j), (i, segments + j, segments + i), (cb, j, i), (ct, segments + i, segments + j)]
    return Mesh(v, f)


# Lobe layout of the bunny-like shape (object frame, meters).
_EARS = [np.array([0.45, 0.28, 1.0]), np.array([0.45, -0.28, 1.0])]
_EARS = [e / np.linalg.norm(e) for e in _EARS]
_HEAD = np.array([0.75, 0.0, 0.62]) / np.linalg.norm([0.75, 0.0, 0.62])


def _bunny_lobes(d: np.ndarray):
    ears = sum(0.05 * np.exp(-(1 - d @ e) / 0.01) for e in _EARS)
    head = 0.028 * np.exp(-(1 - d @ _HEAD) / 0.06)
    return ears, head


def _bunny_radius(d: np.ndarray) -> np.ndarray:
    body = 1.0 / np.sqrt((d[:, 0] / 0.05) ** 2 + (d[:, 1] / 0.04) ** 2 + (d[:, 2] / 0.038) ** 2)
    ears, head = _bunny_lobes(d)
    r = body + ears + head
    # Flat base.
    down = d[:, 2] < -1e-9
    r[down] = np.minimum(r[down], 0.03 / -d[down, 2])
    return r


def bunny_mesh(subdiv: int = 5) -> Mesh:
    """Star-shaped stand-in: ellipsoidal body, a head lobe, two ears, flat base."""
    m = icosphere(subdiv)
    d = m.vertices
    return Mesh(d * _bunny_radius(d)[:, None], m.faces)


def bunny_part_labels(points: np.ndarray) -> list:
    d = points / np.linalg.norm(points, axis=1, keepdims=True)
    ears, head = _bunny_lobes(d)
    labels = np.full(len(points), "body", dtype=object)
    labels[points[:, 2] < -0.027] = "base"
    labels[head > 0.006] = "head"
    labels[ears > 0.006] = "ears"
    return labels.tolist()


def generic_part_labels(shape: str, points: np.ndarray) -> list:
    z = points[:, 2]
    lo, hi = z.min(), z.max()
    if shape == "sphere":
        return np.where(z > hi - 0.3 * (hi - lo), "cap", np.where(z < lo + 0.3 * (hi - lo), "bottom", "side")).tolist()
    if shape == "cylinder":
        r = np.linalg.norm(points[:, :2], axis=1)
        top = z > hi - 1e-6
        rim = (top | (z < lo + 1e-6)) & (r > 0.8 * r.max())
        return np.where(rim, "rim", np.where(top, "top", "side")).tolist()
    if shape == "box":
        h = np.abs(points).max(0)
        near = (np.abs(points) > 0.8 * h).sum(1) >= 2
        return np.where(near, "edges", np.where(z > hi - 1e-6, "top", "sides")).tolist()
    return ["unknown"] * len(points)


def make_shape(shape: str) -> Mesh:
    if shape == "sphere":
        return sphere_mesh()
    if shape == "box":
        return box_mesh()
    if shape == "cylinder":
        return cylinder_mesh()
    if shape == "bunny":
        return bunny_mesh()
    raise ValueError(f"unknown shape {shape!r}; choose from {SHAPES}")


def gt_point_cloud(mesh: Mesh, n: int, seed: int = 0, return_faces: bool = False):
    """Area-weighted uniform samples on the mesh surface."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    a = mesh.areas()
    face = rng.choice(len(a), size=n, p=a / a.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.triangles[face]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return (pts, face) if return_faces else pts


def point_triangle_distance(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Distance from one point to each triangle (closest-point regions)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = np.einsum("ij,ij->i", ab, ap), np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3, d4 = np.einsum("ij,ij->i", ab, bp), np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5, d6 = np.einsum("ij,ij->i", ab, cp), np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        q = a + ab * v[:, None] + ac * w[:, None]
        # Edge and vertex regions.
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    sel = lambda m, x: np.where(m[:, None], x, q)
    q = sel((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t_ab[:, None] * ab)
    q = sel((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t_ac[:, None] * ac)
    q = sel((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + t_bc[:, None] * (c - b))
    q = sel((d1 <= 0) & (d2 <= 0), a)
    q = sel((d3 >= 0) & (d4 <= d3), b)
    q = sel((d6 >= 0) & (d5 <= d6), c)
    return np.linalg.norm(p - q, axis=1)


def mesh_distance(mesh: Mesh, points: np.ndarray) -> np.ndarray:
    tris = mesh.triangles
    return np.array([point_triangle_distance(p, tris).min() for p in np.atleast_2d(points)])


# BVH raycasting ---------------------------------------------------------------

@dataclass
class BVH:
    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray


def build_bvh(mesh: Mesh, leaf_size: int = 4) -> BVH:
    tris = mesh.triangles
    cent = tris.mean(1)
    tlo, thi = tris.min(1), tris.max(1)
    bmin, bmax, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(tris))

    def node(lo, hi):
        i = len(bmin)
        idx = order[lo:hi]
        bmin.append(tlo[idx].min(0))
        bmax.append(thi[idx].max(0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        if hi - lo > leaf_size:
            ext = cent[idx].max(0) - cent[idx].min(0)
            ax = int(np.argmax(ext))
            order[lo:hi] = idx[np.argsort(cent[idx, ax], kind="stable")]
            mid = (lo + hi) // 2
            count[i] = 0
            left[i] = node(lo, mid)
            right[i] = node(mid, hi)
        return i

    node(0, len(tris))
    t = tris[order]
    return BVH(np.array(bmin), np.array(bmax), np.array(left), np.array(right), np.array(start),
               np.array(count), order, t[:, 0].copy(), (t[:, 1] - t[:, 0]).copy(), (t[:, 2] - t[:, 0]).copy())


@njit(cache=True)
def _raycast(orig, dirs, bmin, bmax, left, right, start, count, v0, e1, e2, tmax):
    n = orig.shape[0]
    t_hit = np.full(n, np.inf)
    tri = np.full(n, -1, np.int64)
    stack = np.empty(128, np.int64)
    for r in range(n):
        ox, oy, oz = orig[r, 0], orig[r, 1], orig[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else 1e30
        iy = 1.0 / dy if dy != 0.0 else 1e30
        iz = 1.0 / dz if dz != 0.0 else 1e30
        best = tmax
        besti = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            k = stack[sp]
            t0x = (bmin[k, 0] - ox) * ix
            t1x = (bmax[k, 0] - ox) * ix
            t0y = (bmin[k, 1] - oy) * iy
            t1y = (bmax[k, 1] - oy) * iy
            t0z = (bmin[k, 2] - oz) * iz
            t1z = (bmax[k, 2] - oz) * iz
            tn = max(max(min(t0x, t1x), min(t0y, t1y)), min(t0z, t1z))
            tf = min(min(max(t0x, t1x), max(t0y, t1y)), max(t0z, t1z))
            if tf < max(tn, 0.0) or tn > best:
                continue
            if count[k] > 0:
                for j in range(start[k], start[k] + count[k]):
                    # Moller-Trumbore
                    px = dy * e2[j, 2] - dz * e2[j, 1]
                    py = dz * e2[j, 0] - dx * e2[j, 2]
                    pz = dx * e2[j, 1] - dy * e2[j, 0]
                    det = e1[j, 0] * px + e1[j, 1] * py + e1[j, 2] * pz
                    if abs(det) < 1e-14:
                        continue
                    inv = 1.0 / det
                    sx, sy, sz = ox - v0[j, 0], oy - v0[j, 1], oz - v0[j, 2]
                    u = (sx * px + sy * py + sz * pz) * inv
                    if u < 0.0 or u > 1.0:
                        continue
                    qx = sy * e1[j, 2] - sz * e1[j, 1]
                    qy = sz * e1[j, 0] - sx * e1[j, 2]
                    qz = sx * e1[j, 1] - sy * e1[j, 0]
                    v = (dx * qx + dy * qy + dz * qz) * inv
                    if v < 0.0 or u + v > 1.0:
                        continue
                    t = (e2[j, 0] * qx + e2[j, 1] * qy + e2[j, 2] * qz) * inv
                    if t > 1e-9 and t < best:
                        best = t
                        besti = j
            else:
                stack[sp] = left[k]
                stack[sp + 1] = right[k]
                sp += 2
        if besti >= 0:
            t_hit[r] = best
            tri[r] = besti
    return t_hit, tri


def raycast(bvh: BVH, origins: np.ndarray, dirs: np.ndarray, tmax: float = np.inf):
    """First hit distance and face index per ray (inf / -1 on miss)."""
    o = np.ascontiguousarray(np.broadcast_to(origins, dirs.shape).reshape(-1, 3), dtype=float)
    d = np.ascontiguousarray(dirs.reshape(-1, 3), dtype=float)
    t, j = _raycast(o, d, bvh.bmin, bvh.bmax, bvh.left, bvh.right, bvh.start, bvh.count, bvh.v0, bvh.e1,
                    bvh.e2, float(min(tmax, 1e30)))
    face = np.where(j >= 0, bvh.order[np.maximum(j, 0)], -1)
    return t.reshape(dirs.shape[:-1]), face.reshape(dirs.shape[:-1])


# room and shading ------------------------------------------------------------

@dataclass(frozen=True)
class Room:
    half_x: float = 1.5
    half_y: float = 1.5
    height: float = 2.0

    def planes(self):
        """(normal pointing into the room, offset) pairs: n . x = offset."""
        return [(np.array([0, 0, 1.0]), 0.0), (np.array([0, 0, -1.0]), -self.height),
                (np.array([1.0, 0, 0]), -self.half_x), (np.array([-1.0, 0, 0]), -self.half_x),
                (np.array([0, 1.0, 0]), -self.half_y), (np.array([0, -1.0, 0]), -self.half_y)]

    def intersect(self, origins, dirs):
        best = np.full(dirs.shape[:-1], np.inf)
        pid = np.full(dirs.shape[:-1], -1)
        for k, (n, off) in enumerate(self.planes()):
            dn = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (off - origins @ n) / dn
            ok = (dn < -1e-12) & (t > 0) & (t < best)
            best = np.where(ok, t, best)
            pid = np.where(ok, k, pid)
        return best, pid


_PLANE_COLORS = np.array([
    [[0.62, 0.55, 0.45], [0.35, 0.30, 0.26]],   # floor
    [[0.85, 0.85, 0.82], [0.75, 0.75, 0.72]],   # ceiling
    [[0.55, 0.65, 0.75], [0.30, 0.40, 0.55]],
    [[0.75, 0.60, 0.50], [0.50, 0.35, 0.30]],
    [[0.55, 0.72, 0.55], [0.30, 0.48, 0.32]],
    [[0.78, 0.74, 0.52], [0.52, 0.48, 0.30]],
])

LIGHT_DIR = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
AMBIENT = 0.35


def room_albedo(points: np.ndarray, pid: np.ndarray) -> np.ndarray:
    """Checkerboard (10 cm) with a slow color drift, per plane."""
    cells = np.floor(points / 0.1).astype(np.int64)
    checker = (cells.sum(-1) & 1).astype(bool)
    base = _PLANE_COLORS[np.maximum(pid, 0)]
    col = np.where(checker[..., None], base[..., 0, :], base[..., 1, :])
    drift = 0.08 * np.sin(points[..., 0] * 2.1 + points[..., 1] * 1.3 + points[..., 2] * 1.7)
    return np.clip(col + drift[..., None], 0, 1)


def shade(albedo, normals):
    lam = np.clip(normals @ LIGHT_DIR, 0, None)
    return np.clip(albedo * (AMBIENT + (1 - AMBIENT) * lam)[..., None], 0, 1)


def object_albedo(points: np.ndarray, material: str, center: np.ndarray) -> np.ndarray:
    if material == "dark":
        base = np.array([0.05, 0.05, 0.06])
        stripe = 0.02 * np.sin(60 * (points[..., 2] - center[2]))
        return np.clip(base + stripe[..., None], 0, 1)
    p = points - center
    c = np.stack([0.65 + 0.2 * np.sin(40 * p[..., 0]), 0.55 + 0.2 * np.sin(35 * p[..., 1] + 1.0),
                  0.45 + 0.2 * np.sin(45 * p[..., 2] + 2.0)], -1)
    return np.clip(c, 0, 1)


def _hash_noise(u, v, seed):
    x = np.sin(u * 12.9898 + v * 78.233 + seed * 37.719) * 43758.5453
    return x - np.floor(x)


@dataclass
class OracleScene:
    mesh: Mesh
    material: str = "lambertian"
    room: Room = field(default_factory=Room)
    shape: str = "custom"
    placement: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bvh: BVH = None

    def __post_init__(self):
        if self.material not in MATERIALS:
            raise ValueError(f"unknown material {self.material!r}")
        if self.bvh is None:
            self.bvh = build_bvh(self.mesh)
        self._normals = self.mesh.face_normals()

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.mesh.bounds()
        return (lo + hi) / 2

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.mesh.vertices - self.center, axis=1).max())

    def part_labels(self, points: np.ndarray) -> list:
        local = points - self.placement
        if self.shape == "bunny":
            return bunny_part_labels(local)
        return generic_part_labels(self.shape, local)


def make_scene(shape: str = "bunny", material: str = "lambertian", center=(0.0, 0.0, 0.25)) -> OracleScene:
    """Object floating at ``center`` inside the default room."""
    mesh = make_shape(shape).transformed(1.0, center)
    return OracleScene(mesh, material, shape=shape, placement=np.asarray(center, dtype=float))


@dataclass
class OracleView:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray       # camera frame, facing the camera
    mask: np.ndarray


def render_oracle(scene: OracleScene, cam: CameraView, view_seed: int = 0) -> OracleView:
    dirs, cosz = cam.pixel_rays()
    o = cam.center
    H, W = cam.height, cam.width
    t_obj, face = raycast(scene.bvh, o, dirs)
    t_bg, pid = scene.room.intersect(np.broadcast_to(o, dirs.shape), dirs)
    hit = np.isfinite(t_obj) & (t_obj < t_bg)
    t = np.where(hit, t_obj, t_bg)
    pts = o + dirs * t[..., None]
    n_room = np.array([p[0] for p in scene.room.planes()])[np.maximum(pid, 0)]
    n_obj = scene._normals[np.maximum(face, 0)]
    n_world = np.where(hit[..., None], n_obj, n_room)
    bg_color = shade(room_albedo(pts, pid), n_room)
    color = bg_color
    if hit.any():
        if scene.material == "transparent-proxy":
            bp = o + dirs * t_bg[..., None]
            obj_col = shade(room_albedo(bp, pid), n_room)
        else:
            obj_col = shade(object_albedo(pts, scene.material, scene.center), n_obj)
            if scene.material == "mirror-like":
                refl = dirs - 2 * np.sum(dirs * n_obj, -1, keepdims=True) * n_obj
                spec = np.clip(refl @ LIGHT_DIR, 0, 1) ** 20
                v, u = np.mgrid[0:H, 0:W]
                noise = _hash_noise(u, v, view_seed) - 0.5
                obj_col = np.clip(obj_col * 0.6 + spec[..., None] * 0.8 + 0.25 * noise[..., None], 0, 1)
        color = np.where(hit[..., None], obj_col, bg_color)
    depth = t * cosz
    n_cam = n_world @ cam.pose.R.T
    d_cam = dirs @ cam.pose.R.T
    flip = np.sum(n_cam * d_cam, -1) > 0
    n_cam = np.where(flip[..., None], -n_cam, n_cam)
    return OracleView(color, depth, n_cam, hit)


def hemisphere_rig(center, n: int, radius: float = 0.4, width: int = 128, height: int = 128,
                   fov_deg: float = 45.0, elevations=(25.0, 40.0, 55.0), phase: float = 0.0) -> list:
    """``n`` cameras around ``center`` at alternating elevations, looking at it."""
    center = np.asarray(center, dtype=float)
    cams = []
    for i in range(n):
        az = phase + 2 * np.pi * i / n
        el = np.deg2rad(elevations[i % len(elevations)])
        eye = center + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(CameraView.from_fov(look_at(eye, center), width, height, fov_deg, name=f"view{i:02d}"))
    return cams


# sensor corruptions ------------------------------------------------------------

def sensor_depth(view: OracleView, rng: np.random.Generator, flying: float = 0.6, noise: float = 0.0015,
                 edge_jump: float = 0.03) -> np.ndarray:
    """Active-stereo style depth: noise growing with range and mixed
    ("flying") depths along discontinuities."""
    d = view.depth.copy()
    dmax = ndimage.maximum_filter(d, size=3)
    dmin = ndimage.minimum_filter(d, size=3)
    edge = (dmax - dmin) > edge_jump
    fly = edge & (rng.random(d.shape) < flying)
    mix = rng.random(d.shape)
    d = np.where(fly, dmin + mix * (dmax - dmin), d)
    d = d + rng.normal(0, 1, d.shape) * noise * (d / 0.5) ** 2
    return np.where(np.isfinite(d) & (d > 0), d, 0.0)


def smooth_field(shape, rng, scale: float, cells: int = 4) -> np.ndarray:
    coarse = rng.normal(0, 1, (cells, cells))
    z = ndimage.zoom(coarse, (shape[0] / cells, shape[1] / cells), order=3)
    return scale * z[:shape[0], :shape[1]]


def monocular_depth(view: OracleView, rng: np.random.Generator, scale_err: float = 0.08,
                    warp: float = 0.03, edge_blur: float = 1.5, edge_jump: float = 0.03) -> np.ndarray:
    """Prior depth with a per-view scale error, a smooth relative warp, and
    inverse depth smeared across discontinuities the way learned monocular
    estimators blur silhouettes."""
    d = view.depth
    if edge_blur > 0:
        edge = (ndimage.maximum_filter(d, size=3) - ndimage.minimum_filter(d, size=3)) > edge_jump
        band = ndimage.binary_dilation(edge, iterations=int(np.ceil(2 * edge_blur)))
        smeared = 1.0 / ndimage.gaussian_filter(1.0 / d, edge_blur)
        d = np.where(band, smeared, d)
    s = 1 + rng.uniform(-scale_err, scale_err)
    w = 1 + smooth_field(d.shape, rng, warp)
    return d * s * w


def normal_prior(view: OracleView, rng: np.random.Generator, sigma: float = 0.06) -> np.ndarray:
    H, W = view.depth.shape
    pert = np.stack([smooth_field((H, W), rng, sigma, 8) for _ in range(3)], -1)
    n = view.normal + pert
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


# touches ---------------------------------------------------------------------

def sensor_frame(normal) -> np.ndarray:
    """Columns: sensor x, y, z in world coordinates, z along ``normal``."""
    z = np.asarray(normal, dtype=float)
    z = z / np.linalg.norm(z)
    a = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(a, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


@dataclass
class TouchResult:
    frame: TactileFrame
    gt: TactilePatch
    contact_point: np.ndarray


def simulate_touch(scene: OracleScene, point, normal, spec: SensorSpec = SensorSpec(),
                   press_depth: float = 0.0005, reflectance: Optional[ReflectanceModel] = None,
                   noise: float = 0.0, rng: Optional[np.random.Generator] = None,
                   standoff: float = 0.05, frame_id: str = "") -> TouchResult:
    """Press a flat gel along ``-normal`` onto the mesh near ``point``."""
    point = np.asarray(point, dtype=float)
    if press_depth < 0 or press_depth > 0.001:
        raise ValueError("press depth must be within [0, 1 mm]")
    off = mesh_distance(scene.mesh, point[None])[0]
    if off > 0.001:
        raise ValueError(f"touch point is {off * 1000:.2f} mm off the surface (limit 1 mm)")
    reflectance = reflectance or ReflectanceModel()
    R = sensor_frame(normal)
    x, y = spec.pixel_coords()
    local = np.stack([x, y, np.full(x.shape, standoff)], -1)
    origins = point + local @ R.T
    dirs = np.broadcast_to(-R[:, 2], origins.shape)
    t, face = raycast(scene.bvh, origins, np.ascontiguousarray(dirs))
    h = standoff - t
    hit = np.isfinite(h)
    if not hit.any():
        raise ValueError("gel footprint does not see the object")
    top = h[hit].max()
    z0 = top - press_depth
    f = np.where(hit, np.maximum(h - z0, 0.0), 0.0)
    contact = f > 0
    # Gel normal points back toward the object: minus the mesh normal.
    n_mesh = scene._normals[np.maximum(face, 0)] @ R
    gel_n = np.where(contact[..., None], -n_mesh, np.array([0.0, 0.0, -1.0]))
    gel_n = np.where(gel_n[..., 2:3] > 0, -gel_n, gel_n)
    origin = point + z0 * R[:, 2]
    pose = Pose(R.T, -R.T @ origin)
    rgb = reflectance.render_height(f, spec, noise=noise, rng=rng)
    rows, cols = np.nonzero(contact)
    pts = np.column_stack([x[rows, cols], y[rows, cols], f[rows, cols]])
    gt = TactilePatch(gel_n, f, contact, pts, gel_n[rows, cols], np.column_stack([rows, cols]), frame_id=frame_id)
    gt.points_world = pose.inverse().apply(pts) if len(pts) else np.zeros((0, 3))
    gt.point_normals_world = gel_n[rows, cols] @ R.T
    frame = TactileFrame(rgb, pose, spec, frame_id)
    return TouchResult(frame, gt, point + top * R[:, 2])


def approach_point(scene: OracleScene, start, normal, reach: float = 0.1):
    """Where a probe moving from ``start`` along ``-normal`` meets the mesh;
    falls back to the nearest mesh vertex when the straight approach misses."""
    start = np.asarray(start, dtype=float)
    n = np.asarray(normal, dtype=float) / np.linalg.norm(normal)
    o = start + reach * n
    t, face = raycast(scene.bvh, o[None], -n[None])
    if np.isfinite(t[0]):
        return o - t[0] * n, scene._normals[face[0]]
    j = int(np.argmin(np.linalg.norm(scene.mesh.vertices - start, axis=1)))
    return scene.mesh.vertices[j].copy(), n


# dataset generation ------------------------------------------------------------

@dataclass
class OracleSpec:
    shape: str = "bunny"
    material: str = "dark"
    n_views: int = 9
    n_test_views: int = 4
    width: int = 128
    height: int = 128
    fov_deg: float = 45.0
    camera_radius: float = 0.4
    center: tuple = (0.0, 0.0, 0.25)
    gt_points: int = 20000
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["center"] = list(self.center)
        return d


def build_scene(spec: OracleSpec) -> OracleScene:
    return make_scene(spec.shape, spec.material, spec.center)


def write_dataset(out_dir, spec: OracleSpec) -> Path:
    """Render train and held-out views with priors and write a manifest."""
    from . import io

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    scene = build_scene(spec)
    train = hemisphere_rig(spec.center, spec.n_views, spec.camera_radius, spec.width, spec.height, spec.fov_deg)
    test = hemisphere_rig(spec.center, spec.n_test_views, spec.camera_radius * 1.05, spec.width, spec.height,
                          spec.fov_deg, elevations=(32.0, 47.0), phase=np.pi / max(spec.n_test_views, 1) / 2)
    frames = []
    for split, cams in (("train", train), ("test", test)):
        for k, cam in enumerate(cams):
            fid = f"{split}{k:02d}"
            v = render_oracle(scene, cam, view_seed=spec.seed * 1000 + len(frames))
            paths = {key: f"images/{fid}_{key}.png" for key in ("color", "depth", "depth_prior", "normal", "mask")}
            io.write_rgb(out / paths["color"], v.color)
            io.write_depth(out / paths["depth"], sensor_depth(v, rng))
            io.write_depth(out / paths["depth_prior"], monocular_depth(v, rng))
            io.write_normals(out / paths["normal"], normal_prior(v, rng))
            io.write_mask(out / paths["mask"], v.mask)
            frames.append({"id": fid, "split": split, "pose": io.pose_to_list(cam.pose),
                           "intrinsics": io.camera_intrinsics(cam), **paths})
    gt, face = gt_point_cloud(scene.mesh, spec.gt_points, seed=spec.seed, return_faces=True)
    io.export_points(gt, out / "gt_cloud.ply", normals=scene._normals[face])
    labels = scene.part_labels(gt)
    names = sorted(set(labels))
    io.export_points(gt, out / "labeled_cloud.ply",
                     extra={"part": np.array([names.index(s) for s in labels], dtype=np.int32)})
    io.write_manifest(out / "manifest.json", {
        "scene": f"oracle-{spec.shape}-{spec.material}", "frames": frames,
        "labeled_cloud": "labeled_cloud.ply", "part_names": names, "gt_cloud": "gt_cloud.ply",
        "class_hint": spec.shape, "extra": {"oracle": spec.to_dict()},
    })
    log.info("wrote oracle dataset with %d frames to %s", len(frames), out)
    return out / "manifest.json"
