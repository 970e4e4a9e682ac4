"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np

from vtsplat.camera import CameraView, Pose
from vtsplat.gaussians import GaussianScene, quat_to_rotmat
from vtsplat.losses import LossWeights, SupervisionFrame, compute_loss
from vtsplat.oracle import hemisphere_rig, make_scene, render_oracle
from vtsplat.render import render
from vtsplat.tactile import SensorSpec
from vtsplat.touch import OUTLIER

PARAM_CLASSES = ("positions", "quats", "scales", "opacities", "colors")
NO_CUTOFF = 1e9


def front_camera(size: int = 32, fov: float = 60.0) -> CameraView:
    return CameraView.from_fov(Pose.identity(), size, size, fov)


def random_gradcheck_scene(rng: np.random.Generator, n: int = 10, n_anchored: int = 2) -> GaussianScene:
    """Gaussians away from every non-differentiable point of the loss.

    Depths are spaced well beyond the step size so the sort order cannot flip,
    the smallest scale is well below the other two so the normal axis cannot
    switch, and opacities stay below the alpha clamp.
    """
    z = 1.0 + 0.02 * rng.permutation(n) + rng.uniform(-0.004, 0.004, n)
    xy = rng.uniform(-0.3, 0.3, (n, 2)) * z[:, None]
    pos = np.column_stack([xy, z])
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = rng.uniform(0.06, 0.15, (n, 3))
    scales[np.arange(n), rng.integers(0, 3, n)] = rng.uniform(0.01, 0.02, n)
    opac = rng.uniform(0.3, 0.8, n)
    cols = rng.uniform(0.1, 0.9, (n, 3))
    anchored = np.zeros(n, dtype=bool)
    anchored[rng.choice(n, n_anchored, replace=False)] = True
    # target normals tilted about 35 degrees from the current axis keep |cos| away from 0 and 1
    R = quat_to_rotmat(q)
    axis = R[np.arange(n), :, np.argmin(scales, axis=1)]
    tilt = rng.standard_normal((n, 3))
    tilt -= np.sum(tilt * axis, axis=1, keepdims=True) * axis
    tilt /= np.linalg.norm(tilt, axis=1, keepdims=True)
    tgt = np.cos(0.6) * axis + np.sin(0.6) * tilt
    tn = np.where(anchored[:, None], tgt, np.nan)
    return GaussianScene(pos, q, scales, opac, cols, anchored, tn)


def gradcheck_frame(scene: GaussianScene, cam: CameraView, rng: np.random.Generator,
                    background=(0.3, 0.4, 0.5)) -> SupervisionFrame:
    """Targets placed so every L1 residual keeps its sign under small steps."""
    out = render(scene, cam, background=background, cutoff=NO_CUTOFF)
    side = np.where(rng.random(out.color.shape) < 0.5, -1.0, 1.0)
    color = out.color + side * rng.uniform(1.0, 2.0, out.color.shape)
    depth = out.depth + 0.5
    n = rng.standard_normal(out.normal.shape)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return SupervisionFrame(cam, color, depth, n)


def loss_fn(scene, frame, background=(0.3, 0.4, 0.5), weights=None):
    return compute_loss(scene, frame, weights or LossWeights(), background, cutoff=NO_CUTOFF)


def finite_difference(scene: GaussianScene, frame, attr: str, h: float = 1e-4, **kw) -> np.ndarray:
    base = getattr(scene, attr)
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        vals = []
        for sgn in (1.0, -1.0):
            s = scene.copy()
            arr = getattr(s, attr).copy()
            arr[idx] += sgn * h
            setattr(s, attr, arr)
            vals.append(loss_fn(s, frame, **kw).loss)
        g[idx] = (vals[0] - vals[1]) / (2 * h)
    return g


def gradient_errors(scene: GaussianScene, frame, h: float = 1e-4) -> dict:
    """Relative error ||analytic - fd|| / ||fd|| per parameter class.

    Anchored positions and opacities are frozen by design, so those entries are
    compared only over free primitives.
    """
    res = loss_fn(scene, frame)
    free = ~scene.anchored
    errs = {}
    for attr in PARAM_CLASSES:
        ana = getattr(res.grads, attr)
        fd = finite_difference(scene, frame, attr, h)
        if attr in ("positions", "opacities"):
            ana, fd = ana[free], fd[free]
        errs[attr] = float(np.linalg.norm(ana - fd) / max(np.linalg.norm(fd), 1e-12))
    return errs


def dbscan_reference(points, eps, min_pts):
    """Textbook definition on a dense distance matrix: clusters are connected
    components of core points; a border point joins the lowest-numbered
    cluster among its core neighbours; clusters are numbered by lowest core
    index."""
    n = len(points)
    d = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1))
    adj = d <= eps
    core = adj.sum(1) >= min_pts
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(n):
            if core[i] and core[j] and adj[i, j]:
                ri, rj = find(i), find(j)
                parent[max(ri, rj)] = min(ri, rj)
    roots = sorted({find(i) for i in range(n) if core[i]}, key=lambda r: min(i for i in range(n)
                                                                             if core[i] and find(i) == r))
    cid = {r: k for k, r in enumerate(roots)}
    labels = np.full(n, OUTLIER)
    for i in range(n):
        if core[i]:
            labels[i] = cid[find(i)]
    for i in range(n):
        if not core[i]:
            near = [labels[j] for j in range(n) if adj[i, j] and core[j]]
            if near:
                labels[i] = min(near)
    return labels


def smooth_heightfield(rng, spec=None, n_bumps=4):
    """Sum of Gaussian bumps kept clear of the border band."""
    spec = spec or SensorSpec()
    v, u = np.mgrid[0:spec.height, 0:spec.width]
    f = np.zeros((spec.height, spec.width))
    for _ in range(n_bumps):
        cu = rng.uniform(0.3, 0.7) * spec.width
        cv = rng.uniform(0.3, 0.7) * spec.height
        s = rng.uniform(10, 25)
        f += rng.uniform(1e-4, 6e-4) * np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s * s))
    return f


HULL_CENTER = np.array([0.0, 0.0, 0.2])


def sphere_views(n, size=128, fov=50.0, radius=0.5):
    scene = make_scene("sphere", "lambertian", HULL_CENTER)
    cams = hemisphere_rig(HULL_CENTER, n, radius, size, size, fov)
    views = [render_oracle(scene, c) for c in cams]
    return scene, cams, views


def random_render_scene(rng, n=12):
    pos = np.column_stack([rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(0.8, 1.6, n)])
    q = rng.standard_normal((n, 4))
    return GaussianScene(pos, q, rng.uniform(0.02, 0.1, (n, 3)), rng.uniform(0.2, 0.95, n),
                         rng.uniform(0, 1, (n, 3)))


# a sphere run small enough for unit tests: every stage in a few seconds
TINY_SPHERE = {
    "seed": 7,
    "oracle": {"shape": "sphere", "material": "lambertian", "n_views": 9, "n_test_views": 2, "width": 48,
               "height": 48, "gt_points": 3000},
    "hull": {"max_background": 500},
    "train": {"total_iterations": 160, "densify_start": 40, "anchor_insert_iteration": 80, "densify_interval": 20,
              "densify_until": 120, "hull_prune_interval": 20, "grad_window": 20, "log_interval": 20,
              "max_gaussians": 4000},
    "touch": {"n_touches": 3, "min_pts": 2},
}
