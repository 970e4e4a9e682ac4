"""Supervision frames and the training objective with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .camera import CameraView
from .gaussians import GaussianScene, quat_to_rotmat
from .render import CUTOFF, RenderOutput, SceneGrads, _drot_dquat, render, render_backward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class SupervisionFrame:
    camera: CameraView
    color: np.ndarray                       # (H, W, 3) in [0, 1]
    depth: Optional[np.ndarray] = None      # (H, W) meters, 0 = invalid
    normal: Optional[np.ndarray] = None     # (H, W, 3) camera frame
    depth_valid: Optional[np.ndarray] = None
    normal_valid: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None       # object silhouette, if known
    frame_id: str = ""

    def __post_init__(self):
        H, W = self.camera.height, self.camera.width
        self.color = np.asarray(self.color, dtype=float)
        if self.color.shape != (H, W, 3):
            raise ValueError(f"frame {self.frame_id!r}: color {self.color.shape} != {(H, W, 3)}")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=float)
            if self.depth.shape != (H, W):
                raise ValueError(f"frame {self.frame_id!r}: depth shape mismatch")
            if self.depth_valid is None:
                self.depth_valid = np.isfinite(self.depth) & (self.depth > 0)
        if self.normal is not None:
            self.normal = np.asarray(self.normal, dtype=float)
            if self.normal.shape != (H, W, 3):
                raise ValueError(f"frame {self.frame_id!r}: normal shape mismatch")
            if self.normal_valid is None:
                nn = np.linalg.norm(self.normal, axis=-1)
                self.normal_valid = np.abs(nn - 1) < 1e-3
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)


@dataclass
class LossWeights:
    color: float = 1.0
    ssim: float = 0.2
    depth: float = 1.0
    normal: float = 0.1
    anchor: float = 0.1

    def __post_init__(self):
        if min(self.color, self.ssim, self.depth, self.normal, self.anchor) < 0:
            raise ValueError("loss weights must be non-negative")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x**2 / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(img, win, axis=0, mode="constant")
    return correlate1d(out, win, axis=1, mode="constant")


def _ssim_terms(a, b, win):
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    var_a = _blur(a * a, win) - mu_a**2
    var_b = _blur(b * b, win) - mu_b**2
    cov = _blur(a * b, win) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_a**2 + mu_b**2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, n1, n2, d1, d2


def _weights_for(shape, mask):
    if mask is None:
        w = np.ones(shape)
    else:
        mask = np.asarray(mask, dtype=bool)
        w = np.broadcast_to(mask.reshape(mask.shape + (1,) * (len(shape) - mask.ndim)), shape).astype(float)
    total = w.sum()
    return w, total


def ssim_value_and_grad(a: np.ndarray, b: np.ndarray, mask=None, need_grad: bool = True):
    """Mean local SSIM of ``a`` against ``b`` and its gradient w.r.t. ``a``.

    Gaussian window 11x11 (sigma 1.5), zero padding, averaged over pixels and
    channels (masked pixels only when ``mask`` is given).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("ssim: images differ in shape")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim: image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_terms(a, b, win)
    smap = n1 * n2 / (d1 * d2)
    w, total = _weights_for(a.shape, mask)
    if total == 0:
        raise ValueError("ssim: empty mask")
    value = float((smap * w).sum() / total)
    if not need_grad:
        return value, None
    dS = w / total
    dmu = dS * (2 * mu_b * n2 / (d1 * d2) - smap * 2 * mu_a / d1)
    dvar = dS * (-smap / d2)
    dcov = dS * (2 * n1 / (d1 * d2))
    grad = (_blur(dmu - 2 * mu_a * dvar - mu_b * dcov, win)
            + 2 * a * _blur(dvar, win) + b * _blur(dcov, win))
    return value, grad


def anchor_loss(scene: GaussianScene):
    """Mean of ``1 - |n . n_target|`` over anchored primitives.

    Returns the loss and its gradient w.r.t. the (unnormalized) quaternions.
    Gaussian axes carry no sign, hence the absolute value.
    """
    g_q = np.zeros_like(scene.quats)
    idx = np.flatnonzero(scene.anchored)
    if len(idx) == 0:
        return 0.0, g_q
    q = scene.quats[idx]
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qu = q / qn
    R = quat_to_rotmat(qu)
    axis = np.argmin(scene.scales[idx], axis=1)
    ar = np.arange(len(idx))
    n = R[ar, :, axis]
    tgt = scene.target_normals[idx]
    cos = np.sum(n * tgt, axis=1)
    loss = float(np.mean(1.0 - np.abs(cos)))
    g_n = -(np.sign(cos) / len(idx))[:, None] * tgt
    GR = np.zeros((len(idx), 3, 3))
    GR[ar, :, axis] = g_n
    g_qu = np.einsum("nkij,nij->nk", _drot_dquat(qu), GR)
    g_q[idx] = (g_qu - qu * np.sum(g_qu * qu, axis=1, keepdims=True)) / qn
    return loss, g_q


@dataclass
class LossResult:
    loss: float
    grads: SceneGrads
    render: RenderOutput
    terms: dict = field(default_factory=dict)


def compute_loss(scene: GaussianScene, frame: SupervisionFrame, weights: LossWeights = None,
                 background=(0.0, 0.0, 0.0), cutoff: float = CUTOFF) -> LossResult:
    """Weighted photometric, SSIM, depth, normal and anchor loss for one view."""
    weights = weights or LossWeights()
    if len(scene) == 0:
        raise ValueError("compute_loss: empty scene")
    cam = frame.camera
    out, ctx = render(scene, cam, background=background, cutoff=cutoff, return_context=True)
    H, W = cam.height, cam.width
    if frame.color.shape != out.color.shape:
        raise ValueError("compute_loss: frame dimensions do not match the render size")
    terms = {}
    d_color = np.zeros((H, W, 3))
    d_depth = np.zeros((H, W))
    d_normal = np.zeros((H, W, 3))

    diff = out.color - frame.color
    terms["color"] = float(np.abs(diff).mean())
    d_color += weights.color * np.sign(diff) / diff.size

    if weights.ssim > 0:
        s, g = ssim_value_and_grad(out.color, frame.color)
        terms["ssim"] = 1.0 - s
        d_color -= weights.ssim * g
    else:
        terms["ssim"] = 0.0

    terms["depth"] = 0.0
    if frame.depth is not None and frame.depth_valid.any():
        v = frame.depth_valid
        dd = np.where(v, out.depth - frame.depth, 0.0)
        cnt = v.sum()
        terms["depth"] = float(np.abs(dd).sum() / cnt)
        d_depth += weights.depth * np.sign(dd) / cnt

    terms["normal"] = 0.0
    if frame.normal is not None and frame.normal_valid.any():
        v = frame.normal_valid
        cnt = v.sum()
        dots = np.sum(out.normal * frame.normal, axis=-1)
        terms["normal"] = float(np.sum(np.where(v, 1.0 - dots, 0.0)) / cnt)
        d_normal -= weights.normal * np.where(v[..., None], frame.normal, 0.0) / cnt

    grads = render_backward(scene, ctx, d_color, d_depth, d_normal)
    la, g_qa = anchor_loss(scene)
    terms["anchor"] = la
    grads.quats += weights.anchor * g_qa
    grads.positions[scene.anchored] = 0.0
    grads.opacities[scene.anchored] = 0.0

    loss = (weights.color * terms["color"] + weights.ssim * terms["ssim"] + weights.depth * terms["depth"]
            + weights.normal * terms["normal"] + weights.anchor * terms["anchor"])
    return LossResult(loss, grads, out, terms)
