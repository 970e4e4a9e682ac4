"""Forward splatting renderer and its analytic backward pass.

Splats are sorted globally by camera depth and alpha-composited front to back.
Color, depth and normal share the compositing weights, so the rasterizer works
on a generic 7-channel feature vector ``[r, g, b, depth, nx, ny, nz]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .camera import CameraView
from .gaussians import GaussianPrimitive, GaussianScene, quat_to_rotmat

COV_FLOOR = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_MAX = 0.99
T_MIN = 1e-4             # early termination threshold on transmittance
CUTOFF = 3.0             # splat support in Mahalanobis units
GUARD_BAND = 0.3         # centers may project this fraction of the image outside it
N_FEAT = 7


@dataclass
class ScreenSplat:
    mean: np.ndarray       # (2,) pixels
    cov: np.ndarray        # (2, 2) pixels^2, floor included
    depth: float           # camera-space z of the center
    opacity: float


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    depth: np.ndarray          # (H, W)
    normal: np.ndarray         # (H, W, 3) camera frame
    transmittance: np.ndarray  # (H, W)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.transmittance


@dataclass
class Projection:
    """Visible splats of one view in compositing order, plus what the backward
    pass needs. ``index`` maps back into the scene."""

    index: np.ndarray
    means: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    normals: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    bbox: np.ndarray
    t_cam: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    R: np.ndarray
    axis: np.ndarray
    sign: np.ndarray

    def __len__(self):
        return len(self.index)

    def features(self) -> np.ndarray:
        return np.concatenate([self.colors, self.depths[:, None], self.normals], axis=1)


def _project_arrays(positions, quats, scales, cam: CameraView, cutoff: float = CUTOFF):
    """Screen-space footprints of the primitives whose centers survive culling.

    Arrays are indexed like ``index``; ``visible`` further drops splats whose
    support misses the image.
    """
    W = cam.pose.R
    t_all = positions @ W.T + cam.pose.t
    z_all = t_all[:, 2]
    front = (z_all > cam.near) & (z_all < cam.far)
    zs = np.where(front, z_all, 1.0)
    u = cam.fx * t_all[:, 0] / zs + cam.cx
    v = cam.fy * t_all[:, 1] / zs + cam.cy
    # Splats centered far outside the frustum (typically close beside the
    # camera) have unreliable linearized footprints that can blanket the image.
    gx, gy = GUARD_BAND * cam.width, GUARD_BAND * cam.height
    in_band = (u > -0.5 - gx) & (u < cam.width - 0.5 + gx) & (v > -0.5 - gy) & (v < cam.height - 0.5 + gy)
    index = np.flatnonzero(front & in_band & np.isfinite(u) & np.isfinite(v))
    t, z = t_all[index], z_all[index]
    means = np.stack([u[index], v[index]], axis=1)
    J = np.zeros((len(z), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * t[:, 0] / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * t[:, 1] / z**2
    R = quat_to_rotmat(quats[index])
    RS = R * scales[index][:, None, :]
    cov3 = RS @ np.swapaxes(RS, 1, 2)
    cov_cam = W @ cov3 @ W.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = cutoff * np.sqrt(lam)
    bbox = np.stack([np.floor(means[:, 0] - r), np.ceil(means[:, 0] + r) + 1,
                     np.floor(means[:, 1] - r), np.ceil(means[:, 1] + r) + 1], axis=1)
    bbox[:, 0:2] = np.clip(bbox[:, 0:2], 0, cam.width)
    bbox[:, 2:4] = np.clip(bbox[:, 2:4], 0, cam.height)
    visible = (bbox[:, 1] > bbox[:, 0]) & (bbox[:, 3] > bbox[:, 2])
    return dict(index=index, t=t, z=z, J=J, R=R, cov_cam=cov_cam, cov2d=cov2d, means=means,
                bbox=bbox.astype(np.int64), visible=visible)


def project_gaussian(g: GaussianPrimitive, cam: CameraView) -> Optional[ScreenSplat]:
    """Project one primitive; ``None`` means culled."""
    p = _project_arrays(g.center[None], g.rotation[None], g.scale[None], cam)
    if len(p["index"]) == 0 or not p["visible"][0]:
        return None
    return ScreenSplat(p["means"][0], p["cov2d"][0], float(p["z"][0]), g.opacity)


def blend_alpha(splat: ScreenSplat, pixel) -> float:
    """Unclipped blending coefficient of ``splat`` at ``pixel``."""
    d = np.asarray(pixel, dtype=float) - splat.mean
    m = d @ np.linalg.solve(splat.cov, d)
    return float(splat.opacity * np.exp(-0.5 * m))


def project_scene(scene: GaussianScene, cam: CameraView, cutoff: float = CUTOFF) -> Projection:
    p = _project_arrays(scene.positions, scene.quats, scene.scales, cam, cutoff)
    sel = np.flatnonzero(p["visible"])
    vis = p["index"][sel]
    cov2d = p["cov2d"][sel]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    R = p["R"][sel]
    axis = np.argmin(scene.scales[vis], axis=1)
    n_world = R[np.arange(len(vis)), :, axis]
    n_cam = n_world @ cam.pose.R.T
    t = p["t"][sel]
    sign = np.where(np.einsum("ij,ij->i", n_cam, t) > 0, -1.0, 1.0)
    n_cam = n_cam * sign[:, None]
    depths = p["z"][sel]
    means = p["means"][sel]
    opac = scene.opacities[vis]
    colors = scene.colors[vis]
    # Canonical order: depth first, remaining keys only break exact ties so the
    # result does not depend on the input ordering.
    order = np.lexsort((colors[:, 2], colors[:, 1], colors[:, 0], opac, means[:, 1], means[:, 0], depths))
    so = sel[order]
    return Projection(
        index=vis[order], means=means[order], cov2d=cov2d[order], conics=conics[order], depths=depths[order],
        normals=n_cam[order], opacities=opac[order], colors=colors[order], bbox=p["bbox"][so],
        t_cam=t[order], J=p["J"][so], cov_cam=p["cov_cam"][so], R=R[order], axis=axis[order],
        sign=sign[order],
    )


@numba.njit(cache=True)
def _composite_forward(means, conics, opac, feats, bbox, H, W, bg, cutoff2):
    M, F = feats.shape
    out = np.zeros((H, W, F))
    T = np.ones((H, W))
    last = np.full((H, W), -1, dtype=np.int64)
    for k in range(M):
        mx, my = means[k, 0], means[k, 1]
        a, b, c = conics[k, 0], conics[k, 1], conics[k, 2]
        o = opac[k]
        for y in range(bbox[k, 2], bbox[k, 3]):
            dy = y - my
            for x in range(bbox[k, 0], bbox[k, 1]):
                t = T[y, x]
                if t < 1e-4:
                    continue
                dx = x - mx
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if m > cutoff2:
                    continue
                alpha = o * np.exp(-0.5 * m)
                if alpha > 0.99:
                    alpha = 0.99
                if alpha <= 0.0:
                    continue
                w = alpha * t
                for f in range(F):
                    out[y, x, f] += feats[k, f] * w
                T[y, x] = t * (1.0 - alpha)
                last[y, x] = k
    for y in range(H):
        for x in range(W):
            for f in range(F):
                out[y, x, f] += T[y, x] * bg[f]
    return out, T, last


@numba.njit(cache=True)
def _composite_backward(means, conics, opac, feats, bbox, bg, cutoff2, T_final, last, dout):
    M, F = feats.shape
    H, W = T_final.shape
    g_means = np.zeros((M, 2))
    g_conics = np.zeros((M, 3))
    g_opac = np.zeros(M)
    g_feats = np.zeros((M, F))
    T_cur = T_final.copy()
    S = np.zeros((H, W, F))
    for y in range(H):
        for x in range(W):
            for f in range(F):
                S[y, x, f] = T_final[y, x] * bg[f]
    for k in range(M - 1, -1, -1):
        mx, my = means[k, 0], means[k, 1]
        a, b, c = conics[k, 0], conics[k, 1], conics[k, 2]
        o = opac[k]
        for y in range(bbox[k, 2], bbox[k, 3]):
            dy = y - my
            for x in range(bbox[k, 0], bbox[k, 1]):
                if k > last[y, x]:
                    continue
                dx = x - mx
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if m > cutoff2:
                    continue
                g = np.exp(-0.5 * m)
                raw = o * g
                alpha = raw if raw < 0.99 else 0.99
                if alpha <= 0.0:
                    continue
                one_m = 1.0 - alpha
                t = T_cur[y, x] / one_m
                w = alpha * t
                d_alpha = 0.0
                for f in range(F):
                    go = dout[y, x, f]
                    g_feats[k, f] += go * w
                    d_alpha += go * (feats[k, f] * t - S[y, x, f] / one_m)
                    S[y, x, f] += feats[k, f] * w
                T_cur[y, x] = t
                if raw < 0.99:
                    g_opac[k] += d_alpha * g
                    d_m = -0.5 * d_alpha * o * g
                    g_conics[k, 0] += d_m * dx * dx
                    g_conics[k, 1] += d_m * 2.0 * dx * dy
                    g_conics[k, 2] += d_m * dy * dy
                    g_means[k, 0] -= d_m * (2.0 * a * dx + 2.0 * b * dy)
                    g_means[k, 1] -= d_m * (2.0 * b * dx + 2.0 * c * dy)
    return g_means, g_conics, g_opac, g_feats


@dataclass
class RenderContext:
    proj: Projection
    bg: np.ndarray
    T: np.ndarray
    last: np.ndarray
    cam: CameraView
    cutoff: float


def _background(background, F=N_FEAT):
    bg = np.zeros(F)
    if background is not None:
        bg[:3] = np.asarray(background, dtype=float).reshape(3)
    return bg


def render(scene: GaussianScene, cam: CameraView, background=(0.0, 0.0, 0.0),
           cutoff: float = CUTOFF, return_context: bool = False):
    """Composite ``scene`` as seen by ``cam``.

    With ``return_context=True`` also returns what :func:`render_backward`
    needs.
    """
    proj = project_scene(scene, cam, cutoff)
    bg = _background(background)
    H, W = cam.height, cam.width
    if len(proj) == 0:
        out = np.broadcast_to(bg, (H, W, N_FEAT)).copy()
        T = np.ones((H, W))
        last = np.full((H, W), -1, dtype=np.int64)
    else:
        out, T, last = _composite_forward(proj.means, proj.conics, proj.opacities, proj.features(),
                                          proj.bbox, H, W, bg, cutoff * cutoff)
    result = RenderOutput(out[..., :3], out[..., 3], out[..., 4:7], T)
    if return_context:
        return result, RenderContext(proj, bg, T, last, cam, cutoff)
    return result


@dataclass
class SceneGrads:
    positions: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    screen: np.ndarray      # |dL/d mean2d| per primitive (0 where not visible)
    visible: np.ndarray     # bool per primitive

    @classmethod
    def zeros(cls, n: int) -> "SceneGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(n, dtype=bool))

    def __iadd__(self, other: "SceneGrads"):
        for name in ("positions", "quats", "scales", "opacities", "colors", "screen"):
            getattr(self, name).__iadd__(getattr(other, name))
        self.visible |= other.visible
        return self


def _drot_dquat(q: np.ndarray) -> np.ndarray:
    """(N, 4, 3, 3) derivative of R(q) w.r.t. a unit quaternion's components."""
    w, x, y, z = q.T
    o = np.zeros_like(w)
    dw = np.stack([o, -z, y, z, o, -x, -y, x, o], -1)
    dx = np.stack([o, y, z, y, -2 * x, -w, z, w, -2 * x], -1)
    dy = np.stack([-2 * y, x, w, x, o, z, -w, z, -2 * y], -1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, o], -1)
    return 2.0 * np.stack([dw, dx, dy, dz], 1).reshape(-1, 4, 3, 3)


def render_backward(scene: GaussianScene, ctx: RenderContext, d_color=None, d_depth=None,
                    d_normal=None) -> SceneGrads:
    """Chain image-space gradients back to every primitive parameter."""
    n = len(scene)
    grads = SceneGrads.zeros(n)
    proj = ctx.proj
    if len(proj) == 0:
        return grads
    cam = ctx.cam
    H, W = cam.height, cam.width
    dout = np.zeros((H, W, N_FEAT))
    if d_color is not None:
        dout[..., :3] = d_color
    if d_depth is not None:
        dout[..., 3] = d_depth
    if d_normal is not None:
        dout[..., 4:7] = d_normal
    g_means, g_conics, g_opac, g_feats = _composite_backward(
        proj.means, proj.conics, proj.opacities, proj.features(), proj.bbox, ctx.bg,
        ctx.cutoff * ctx.cutoff, ctx.T, ctx.last, dout)

    idx = proj.index
    Wr = cam.pose.R
    m = len(idx)
    ar = np.arange(m)

    # conic -> 2D covariance
    A = np.empty((m, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = (proj.conics[:, 0], proj.conics[:, 1],
                                                      proj.conics[:, 1], proj.conics[:, 2])
    GA = np.empty((m, 2, 2))
    GA[:, 0, 0] = g_conics[:, 0]
    GA[:, 1, 1] = g_conics[:, 2]
    GA[:, 0, 1] = GA[:, 1, 0] = 0.5 * g_conics[:, 1]
    G2 = -A @ GA @ A
    # cov2d = J Mc J^T
    J, Mc = proj.J, proj.cov_cam
    GM = np.swapaxes(J, 1, 2) @ G2 @ J
    GJ = 2.0 * G2 @ J @ Mc
    G3 = Wr.T @ GM @ Wr

    t = proj.t_cam
    z = t[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros((m, 3))
    g_t[:, 0] += g_means[:, 0] * fx / z
    g_t[:, 1] += g_means[:, 1] * fy / z
    g_t[:, 2] -= (g_means[:, 0] * fx * t[:, 0] + g_means[:, 1] * fy * t[:, 1]) / z**2
    g_t[:, 0] -= GJ[:, 0, 2] * fx / z**2
    g_t[:, 1] -= GJ[:, 1, 2] * fy / z**2
    g_t[:, 2] += (-GJ[:, 0, 0] * fx / z**2 - GJ[:, 1, 1] * fy / z**2
                  + 2 * GJ[:, 0, 2] * fx * t[:, 0] / z**3 + 2 * GJ[:, 1, 2] * fy * t[:, 1] / z**3)
    g_t[:, 2] += g_feats[:, 3]
    grads.positions[idx] = g_t @ Wr

    # cov3 = R S^2 R^T and the normal axis
    R = proj.R
    s = scene.scales[idx]
    GR = 2.0 * G3 @ R * (s**2)[:, None, :]
    g_s = 2.0 * s * np.einsum("nji,njk,nki->ni", R, G3, R)
    g_nworld = proj.sign[:, None] * (g_feats[:, 4:7] @ Wr)
    GR[ar, :, proj.axis] += g_nworld
    q = scene.quats[idx]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qu = q / qn
    g_qu = np.einsum("nkij,nij->nk", _drot_dquat(qu), GR)
    grads.quats[idx] = (g_qu - qu * np.sum(g_qu * qu, axis=1, keepdims=True)) / qn
    grads.scales[idx] = g_s
    grads.opacities[idx] = g_opac
    grads.colors[idx] = g_feats[:, :3]
    grads.screen[idx] = np.linalg.norm(g_means, axis=1)
    grads.visible[idx] = True
    return grads


def composite_pixel_reference(scene: GaussianScene, cam: CameraView, pixel, background=(0.0, 0.0, 0.0),
                              cutoff: float = CUTOFF):
    """Plain-Python compositing of one pixel.

    Returns the composited feature vector and the transmittance before each
    contributing splat (in order), ending with the final value.
    """
    proj = project_scene(scene, cam, cutoff)
    feats = proj.features()
    x, y = pixel
    T = 1.0
    trace = [T]
    acc = np.zeros(N_FEAT)
    for k in range(len(proj)):
        if T < T_MIN:
            break
        d = np.array([x, y], dtype=float) - proj.means[k]
        a, b, c = proj.conics[k]
        m = a * d[0] ** 2 + 2 * b * d[0] * d[1] + c * d[1] ** 2
        if m > cutoff * cutoff:
            continue
        alpha = min(ALPHA_MAX, proj.opacities[k] * np.exp(-0.5 * m))
        acc += feats[k] * alpha * T
        T *= 1 - alpha
        trace.append(T)
    acc += T * _background(background)
    return acc, np.array(trace)
