"""Visual hull carving, the tolerance shell around it, and seed generation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .camera import CameraView

log = logging.getLogger(__name__)


class HullError(RuntimeError):
    pass


@dataclass
class SilhouetteMask:
    mask: np.ndarray
    camera: CameraView

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.camera.height, self.camera.width):
            raise ValueError("silhouette dimensions do not match the view")


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray      # center of voxel (0, 0, 0)
    resolution: float
    dims: tuple

    def centers(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + idx * self.resolution

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.asarray(self.dims) - 1) * self.resolution

    @classmethod
    def from_bounds(cls, lo, hi, resolution: float) -> "GridSpec":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        dims = tuple(int(d) for d in np.maximum(np.ceil((hi - lo) / resolution).astype(int) + 1, 1))
        return cls(lo, float(resolution), dims)


@dataclass
class VoxelHull:
    grid: GridSpec
    occupancy: np.ndarray
    n_components: int = 0
    view_stats: Optional[list] = None

    @property
    def origin(self):
        return self.grid.origin

    @property
    def resolution(self):
        return self.grid.resolution

    @property
    def dims(self):
        return self.grid.dims

    @property
    def volume(self) -> float:
        return float(self.occupancy.sum()) * self.resolution**3

    def occupied_centers(self) -> np.ndarray:
        return self.grid.origin + np.argwhere(self.occupancy) * self.resolution

    def surface_mask(self) -> np.ndarray:
        """Occupied voxels with at least one empty 6-neighbour (grid border
        counts as empty)."""
        occ = np.pad(self.occupancy, 1, constant_values=False)
        interior = occ[1:-1, 1:-1, 1:-1].copy()
        for ax in range(3):
            for sh in (-1, 1):
                interior &= np.roll(occ, sh, axis=ax)[1:-1, 1:-1, 1:-1]
        return self.occupancy & ~interior

    def surface_centers(self) -> np.ndarray:
        return self.grid.origin + np.argwhere(self.surface_mask()) * self.resolution

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True where a point falls inside an occupied voxel cube."""
        ijk = np.floor((np.asarray(points) - self.grid.origin) / self.resolution + 0.5).astype(int)
        ok = np.all((ijk >= 0) & (ijk < np.asarray(self.grid.dims)), axis=1)
        out = np.zeros(len(ijk), dtype=bool)
        out[ok] = self.occupancy[tuple(ijk[ok].T)]
        return out

    def bounds(self):
        c = self.occupied_centers()
        h = self.resolution / 2
        return c.min(0) - h, c.max(0) + h


def _mask_distance(mask: np.ndarray) -> np.ndarray:
    """Per-pixel distance (px) to the nearest silhouette pixel."""
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def _vote(centers, masks, dists, half_diag):
    """Per view: (in-bounds, outside-silhouette) flags for each voxel center."""
    n = len(centers)
    seen = np.zeros((len(masks), n), dtype=bool)
    outside = np.zeros((len(masks), n), dtype=bool)
    for i, (m, dist) in enumerate(zip(masks, dists)):
        cam = m.camera
        uv, z = cam.project(centers)
        u = np.rint(uv[:, 0])
        v = np.rint(uv[:, 1])
        inb = (z > cam.near) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        seen[i] = inb
        ui, vi = u[inb].astype(int), v[inb].astype(int)
        # Cube footprint: projected half-diagonal, plus one pixel diagonal for
        # rounding the center and for the mask's pixel-center sampling.
        r = cam.fx * half_diag / z[inb] + np.sqrt(2.0)
        outside[i, inb] = dist[vi, ui] > r
    return seen, outside


def _keep(seen, outside, tolerance):
    n_seen = seen.sum(0)
    n_out = outside.sum(0)
    return (n_seen > 0) & (n_out <= tolerance * n_seen + 1e-9)


def auto_grid(masks: Sequence[SilhouetteMask], resolution: float, pad: float = 0.1, min_pad: float = 0.03,
              tolerance: float = 0.05, z_min: Optional[float] = None, coarse_cells: int = 48) -> GridSpec:
    """Fit the carving grid around the region all silhouettes agree on."""
    centers = np.stack([m.camera.center for m in masks])
    axes = np.stack([m.camera.pose.R[2] for m in masks])
    # Point closest (least squares) to every optical axis.
    P = np.eye(3)[None] - axes[:, :, None] * axes[:, None, :]
    focus = np.linalg.lstsq(P.sum(0), np.einsum("nij,nj->i", P, centers), rcond=None)[0]
    radius = np.linalg.norm(centers - focus, axis=1).max()
    lo, hi = focus - radius, focus + radius
    if z_min is not None:
        lo[2] = max(lo[2], z_min)
    coarse = GridSpec.from_bounds(lo, hi, (hi - lo).max() / coarse_cells)
    pts = coarse.centers()
    dists = [_mask_distance(m.mask) for m in masks]
    seen, outside = _vote(pts, masks, dists, coarse.resolution * np.sqrt(3) / 2)
    # Only trust the region most views agree on; cone tips near a single
    # camera would otherwise inflate the box.
    keep = _keep(seen, outside, tolerance) & (seen.sum(0) >= max(2, int(np.ceil(0.5 * len(masks)))))
    if not keep.any():
        raise HullError("degenerate carving: no region is consistent with the silhouettes")
    kept = pts[keep]
    h = coarse.resolution
    blo, bhi = kept.min(0) - h, kept.max(0) + h
    margin = np.maximum(pad * (bhi - blo), min_pad)
    blo, bhi = blo - margin, bhi + margin
    if z_min is not None:
        blo[2] = max(blo[2], z_min)
    return GridSpec.from_bounds(blo, bhi, resolution)


def carve(masks: Sequence[SilhouetteMask], grid: Optional[GridSpec] = None, resolution: float = 0.005,
          tolerance: float = 0.05, z_min: Optional[float] = None) -> VoxelHull:
    """Keep voxels that fall outside the silhouette in at most ``tolerance`` of
    the views that see them."""
    masks = list(masks)
    if len(masks) < 2:
        raise ValueError("carving needs at least two silhouettes")
    if grid is None:
        grid = auto_grid(masks, resolution, tolerance=tolerance, z_min=z_min)
    pts = grid.centers()
    dists = [_mask_distance(m.mask) for m in masks]
    seen, outside = _vote(pts, masks, dists, grid.resolution * np.sqrt(3) / 2)
    keep = _keep(seen, outside, tolerance)
    stats = []
    for i, m in enumerate(masks):
        s = seen[i].sum()
        stats.append({"view": m.camera.name or str(i), "seen": int(s),
                      "outside_fraction": float(outside[i].sum() / s) if s else None,
                      "mask_pixels": int(m.mask.sum())})
    if not keep.any():
        detail = "; ".join(f"{d['view']}: outside={d['outside_fraction']}, mask_px={d['mask_pixels']}"
                           for d in stats)
        raise HullError(f"degenerate carving ({detail})")
    occ = keep.reshape(grid.dims)
    _, ncomp = ndimage.label(occ)
    log.info("carved hull: %d voxels, %d component(s)", occ.sum(), ncomp)
    return VoxelHull(grid, occ, int(ncomp), stats)


@dataclass
class HullShell:
    hull: VoxelHull
    t_interior: float = 0.005
    t_exterior: float = 0.02
    sdf: np.ndarray = None

    def __post_init__(self):
        if self.t_interior < self.hull.resolution:
            raise ValueError("interior thickness must be at least the voxel resolution")
        if self.t_exterior <= 0:
            raise ValueError("exterior thickness must be positive")

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance to the hull surface (negative inside), meters.

        Outside the grid the value at the nearest grid point is extended by the
        distance to it.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        g = self.hull.grid
        f = (points - g.origin) / g.resolution
        hi = np.asarray(g.dims) - 1
        fc = np.clip(f, 0, hi)
        vals = ndimage.map_coordinates(self.sdf, fc.T, order=1, mode="nearest")
        return vals + np.linalg.norm(f - fc, axis=1) * g.resolution

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Unit outward direction from the distance field (central differences)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        h = self.hull.resolution
        g = np.zeros_like(points)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = h
            g[:, ax] = self.signed_distance(points + e) - self.signed_distance(points - e)
        n = np.linalg.norm(g, axis=1, keepdims=True)
        return g / np.where(n > 0, n, 1.0)

    def permitted(self, points: np.ndarray) -> np.ndarray:
        return self.signed_distance(points) <= self.t_exterior

    def in_band(self, points: np.ndarray) -> np.ndarray:
        d = self.signed_distance(points)
        return (d >= -self.t_interior) & (d <= self.t_exterior)

    def roi(self, dilation: float = 0.10):
        lo, hi = self.hull.bounds()
        return lo - dilation, hi + dilation


def build_shell(hull: VoxelHull, t_interior: float = 0.005, t_exterior: float = 0.02) -> HullShell:
    """Signed distance on the grid, with the surface on voxel faces."""
    if not hull.occupancy.any():
        raise HullError("cannot build a shell around an empty hull")
    occ = hull.occupancy
    res = hull.resolution
    # Pad so the grid border counts as empty space.
    pad = np.pad(occ, 1, constant_values=False)
    d_out = ndimage.distance_transform_edt(~pad)[1:-1, 1:-1, 1:-1] * res
    d_in = ndimage.distance_transform_edt(pad)[1:-1, 1:-1, 1:-1] * res
    sdf = np.where(occ, -(d_in - res / 2), d_out - res / 2)
    return HullShell(hull, t_interior, t_exterior, sdf)


@dataclass
class DepthPriorFrame:
    camera: CameraView
    depth: np.ndarray           # (H, W) z-depth, 0 = invalid
    color: np.ndarray           # (H, W, 3)
    mask: Optional[np.ndarray] = None


@dataclass
class SeedSet:
    object_points: np.ndarray
    object_colors: np.ndarray
    background_points: np.ndarray
    background_colors: np.ndarray
    stride: int = 1


def _object_colors(points, frames):
    colors = np.full((len(points), 3), 0.5)
    best = np.full(len(points), np.inf)
    for fr in frames:
        cam = fr.camera
        uv, z = cam.project(points)
        u, v = np.rint(uv[:, 0]), np.rint(uv[:, 1])
        ok = (z > cam.near) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        ui, vi = u[ok].astype(int), v[ok].astype(int)
        if fr.mask is not None:
            inm = np.zeros(len(points), dtype=bool)
            inm[ok] = fr.mask[vi, ui]
            ok &= inm
            ui, vi = u[ok].astype(int), v[ok].astype(int)
        dist = np.linalg.norm(points[ok] - cam.center, axis=1)
        closer = dist < best[ok]
        idx = np.flatnonzero(ok)[closer]
        best[idx] = dist[closer]
        colors[idx] = fr.color[vi[closer], ui[closer]]
    return colors


def seed_points(shell: HullShell, frames: Sequence[DepthPriorFrame], tau_d: float = 0.01,
                max_background: int = 100_000, stride: Optional[int] = None) -> SeedSet:
    """Object seeds on the hull surface plus background seeds from depth priors
    that lie at least ``tau_d`` outside the hull."""
    frames = list(frames)
    if not frames:
        raise ValueError("seed_points needs at least one depth prior frame")
    hull = shell.hull
    obj = hull.surface_centers()
    if stride is None:
        n_valid = sum(int(np.count_nonzero(f.depth > 0)) for f in frames)
        stride = max(1, int(np.ceil(np.sqrt(n_valid / max(max_background, 1)))))
    g = hull.grid
    lo, hi = g.origin - g.resolution / 2, g.upper + g.resolution / 2
    pts, cols = [], []
    overlaps = False
    for fr in frames:
        P, (v, u) = fr.camera.backproject(fr.depth, stride)
        if len(P) == 0:
            continue
        overlaps |= bool(np.any(np.all((P >= lo) & (P <= hi), axis=1)))
        keep = shell.signed_distance(P) >= tau_d
        pts.append(P[keep])
        cols.append(fr.color[v[keep], u[keep]])
    if not overlaps:
        raise HullError("no depth prior frame overlaps the hull grid")
    bg = np.concatenate(pts) if pts else np.zeros((0, 3))
    bgc = np.concatenate(cols) if cols else np.zeros((0, 3))
    return SeedSet(obj, _object_colors(obj, frames), bg, bgc, stride)
