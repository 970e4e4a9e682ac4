"""Training loop pieces: optimizer step, densification, hull pruning, anchors."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import GaussianScene, quat_from_two_vectors
from .hull import HullShell
from .losses import LossWeights, SupervisionFrame, compute_loss
from .render import SceneGrads

log = logging.getLogger(__name__)

PARAMS = ("positions", "quats", "scales", "opacities", "colors")


@dataclass
class TrainConfig:
    total_iterations: int = 15000
    densify_start: int = 800
    anchor_insert_iteration: int = 1000
    densify_interval: int = 100
    densify_until: int = 7500
    hull_prune_interval: int = 100
    grad_window: int = 100
    densify_grad_min: float = 0.0
    percent_dense: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    max_gaussians: int = 200_000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_color: float = 5e-3
    scene_extent: float = 1.0
    anchor_scale: float = 0.0005
    anchor_flatness: float = 0.2
    anchor_opacity: float = 0.95
    anchor_budget: int = 256
    roi_dilation: float = 0.10
    hull_pruning: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    weights: LossWeights = field(default_factory=LossWeights)
    log_interval: int = 100

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.background = tuple(float(x) for x in self.background)
        if not (self.densify_start < self.anchor_insert_iteration < self.total_iterations):
            raise ValueError("need densify_start < anchor_insert_iteration < total_iterations")
        if self.densify_interval <= 0 or self.hull_prune_interval <= 0:
            raise ValueError("intervals must be positive")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        kw.setdefault("total_iterations", 3000)
        kw.setdefault("densify_until", 2000)
        kw.setdefault("max_gaussians", 30_000)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d


def _mean_in_range(x: np.ndarray) -> float:
    """Mean kept inside [min, max] so rounding cannot push it past every sample."""
    if len(x) == 0:
        return 0.0
    return float(np.clip(x.mean(), x.min(), x.max()))


class GradientAccumulator:
    """Running mean of the screen-space positional gradient norm."""

    def __init__(self, n: int):
        self.total = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return len(self.total)

    def add(self, grads: SceneGrads) -> None:
        v = grads.visible
        self.total[v] += grads.screen[v]
        self.count[v] += 1

    def mean(self) -> np.ndarray:
        return np.divide(self.total, self.count, out=np.zeros_like(self.total), where=self.count > 0)

    def reset(self) -> None:
        self.total[:] = 0
        self.count[:] = 0

    def region_mean(self, region: np.ndarray) -> float:
        return _mean_in_range(self.mean()[region & (self.count > 0)])

    def remap(self, keep: np.ndarray, n_new: int = 0) -> None:
        self.total = np.concatenate([self.total[keep], np.zeros(n_new)])
        self.count = np.concatenate([self.count[keep], np.zeros(n_new, dtype=np.int64)])


class AdamState:
    """First/second moments per parameter class, one row per primitive."""

    def __init__(self, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        shapes = {"positions": 3, "quats": 4, "scales": 3, "opacities": 1, "colors": 3}
        self.m = {k: np.zeros((n, d)) for k, d in shapes.items()}
        self.v = {k: np.zeros((n, d)) for k, d in shapes.items()}
        self.t = 0

    def remap(self, keep: np.ndarray, n_new: int = 0) -> None:
        for store in (self.m, self.v):
            for k, a in store.items():
                store[k] = np.concatenate([a[keep], np.zeros((n_new, a.shape[1]))])

    def arrays(self) -> dict:
        out = {"t": np.array(self.t)}
        for k in self.m:
            out[f"m_{k}"] = self.m[k]
            out[f"v_{k}"] = self.v[k]
        return out

    @classmethod
    def from_arrays(cls, d: dict) -> "AdamState":
        st = cls(len(d["m_positions"]))
        st.t = int(d["t"])
        for k in st.m:
            st.m[k] = np.array(d[f"m_{k}"])
            st.v[k] = np.array(d[f"v_{k}"])
        return st


def position_lr(config: TrainConfig, iteration: int) -> float:
    """Exponential decay from the initial to the final position rate."""
    frac = min(max(iteration / max(config.total_iterations, 1), 0.0), 1.0)
    lr0 = config.lr_position * config.scene_extent
    lr1 = config.lr_position_final * config.scene_extent
    return float(np.exp(np.log(lr0) * (1 - frac) + np.log(lr1) * frac))


def step(scene: GaussianScene, grads: SceneGrads, config: TrainConfig, state: AdamState,
         iteration: int = 0) -> GaussianScene:
    """One Adam update. Scales move in log space and opacities in logit space;
    anchored centers and opacities are never written."""
    out = scene.copy()
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    free = ~scene.anchored
    o = np.clip(scene.opacities, 1e-6, 1 - 1e-6)
    g = {
        "positions": grads.positions,
        "quats": grads.quats,
        "scales": grads.scales * scene.scales,
        "opacities": (grads.opacities * o * (1 - o))[:, None],
        "colors": grads.colors,
    }
    lrs = {"positions": position_lr(config, iteration), "quats": config.lr_rotation,
           "scales": config.lr_scale, "opacities": config.lr_opacity, "colors": config.lr_color}
    delta = {}
    for k in PARAMS:
        gk = g[k]
        if k in ("positions", "opacities"):
            gk = np.where(free[:, None], gk, 0.0)
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * gk
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * gk * gk
        d = -lrs[k] * (m / c1) / (np.sqrt(v / c2) + eps)
        if k in ("positions", "opacities"):
            d[~free] = 0.0
        delta[k] = d
    out.positions = scene.positions + delta["positions"]
    q = scene.quats + delta["quats"]
    moved = np.any(delta["quats"] != 0, axis=1)
    q[moved] /= np.linalg.norm(q[moved], axis=1, keepdims=True)
    out.quats = q
    out.scales = scene.scales * np.exp(delta["scales"])
    d_o = delta["opacities"][:, 0]
    logit = np.log(o / (1 - o))
    out.opacities = np.where(d_o != 0, 1 / (1 + np.exp(-(logit + d_o))), scene.opacities)
    out.colors = np.clip(scene.colors + delta["colors"], 0.0, 1.0)
    return out


def densify(scene: GaussianScene, acc: GradientAccumulator, config: TrainConfig,
            rng: np.random.Generator, state: Optional[AdamState] = None):
    """Clone small / split large high-gradient primitives, drop transparent ones.

    Returns the new scene and the densification mean gradient (the touch
    threshold). The accumulator and optimizer state are remapped in place and
    the accumulator is reset.
    """
    means = acc.mean()
    observed = acc.count > 0
    tau = _mean_in_range(means[observed])
    thr = max(tau, config.densify_grad_min)
    cand = np.flatnonzero((means > thr) & ~scene.anchored)
    room = max(config.max_gaussians - len(scene), 0)
    if len(cand) > room:
        order = np.argsort(-means[cand], kind="stable")
        cand = np.sort(cand[order[:room]])
    big = scene.scales[cand].max(axis=1) > config.percent_dense * config.scene_extent
    split_idx, clone_idx = cand[big], cand[~big]

    clones = scene.subset(clone_idx)
    kids = scene.subset(np.repeat(split_idx, 2))
    if len(kids):
        from .gaussians import quat_to_rotmat

        R = quat_to_rotmat(kids.quats)
        offs = rng.standard_normal((len(kids), 3)) * kids.scales
        kids.positions = kids.positions + np.einsum("nij,nj->ni", R, offs)
        kids.scales = kids.scales / config.split_factor
    keep = np.ones(len(scene), dtype=bool)
    keep[split_idx] = False
    keep &= ~((scene.opacities < config.prune_opacity) & ~scene.anchored)
    new_scene = scene.subset(keep).concat(clones).concat(kids)
    n_new = len(clones) + len(kids)
    acc.remap(keep, n_new)
    acc.reset()
    if state is not None:
        state.remap(keep, n_new)
    log.debug("densify: tau=%.4g cloned=%d split=%d removed=%d", tau, len(clone_idx), len(split_idx),
              int((~keep).sum()) - len(split_idx))
    return new_scene, tau


def hull_prune_mask(scene: GaussianScene, shell: HullShell, roi) -> np.ndarray:
    """Keep-mask: drop free primitives inside ``roi`` beyond the shell."""
    lo, hi = (np.asarray(r, dtype=float) for r in roi)
    hlo, hhi = shell.hull.bounds()
    if np.any(lo > hlo + 1e-9) or np.any(hi < hhi - 1e-9):
        raise ValueError("hull_prune: roi does not enclose the hull")
    inside = np.all((scene.positions >= lo) & (scene.positions <= hi), axis=1)
    keep = np.ones(len(scene), dtype=bool)
    cand = inside & ~scene.anchored
    if cand.any():
        keep[cand] = shell.signed_distance(scene.positions[cand]) <= shell.t_exterior
    return keep


def hull_prune(scene: GaussianScene, shell: HullShell, roi) -> GaussianScene:
    return scene.subset(hull_prune_mask(scene, shell, roi))


def farthest_point_subsample(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of ``k`` points chosen greedily by farthest-point sampling,
    starting from index 0."""
    n = len(points)
    if n <= k:
        return np.arange(n)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    d = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, k):
        j = int(np.argmax(d))
        chosen[i] = j
        d = np.minimum(d, np.linalg.norm(points - points[j], axis=1))
    return np.sort(chosen)


def anchors_from_patches(patches: Sequence, config: TrainConfig, reference: Optional[GaussianScene] = None
                         ) -> GaussianScene:
    pts, nrm = [], []
    for p in patches:
        P, N = p.points_world, p.point_normals_world
        if P is None or len(P) == 0:
            continue
        idx = farthest_point_subsample(P, config.anchor_budget)
        pts.append(P[idx])
        nrm.append(N[idx])
    if not pts:
        return GaussianScene.empty()
    P = np.concatenate(pts)
    N = np.concatenate(nrm)
    N = N / np.linalg.norm(N, axis=1, keepdims=True)
    n = len(P)
    if reference is not None and len(reference):
        _, j = cKDTree(reference.positions).query(P)
        colors = reference.colors[j]
    else:
        colors = np.full((n, 3), 0.5)
    # thin discs whose short axis starts on the measured contact normal
    quats = np.stack([quat_from_two_vectors([0.0, 0.0, 1.0], nv) for nv in N])
    s = config.anchor_scale
    scales = np.tile([s, s, s * config.anchor_flatness], (n, 1))
    return GaussianScene(P, quats, scales, np.full(n, config.anchor_opacity), colors, np.ones(n, dtype=bool), N)


def insert_anchors(scene: GaussianScene, patches: Sequence, config: TrainConfig) -> GaussianScene:
    """Append one anchored primitive per (subsampled) tactile contact point."""
    anchors = anchors_from_patches(patches, config, scene)
    if len(anchors) == 0:
        return scene
    return scene.concat(anchors)


@dataclass
class DensifyRecord:
    iteration: int
    tau_all: float
    tau_object: float
    means: np.ndarray
    positions: np.ndarray


class Trainer:
    """Owns the scene, optimizer state and schedules for one training run."""

    def __init__(self, scene: GaussianScene, frames: Sequence[SupervisionFrame], config: TrainConfig,
                 shell: Optional[HullShell] = None, seed: int = 0,
                 on_log: Optional[Callable[[dict], None]] = None):
        self.scene = scene.copy()
        self.frames = list(frames)
        self.config = config
        self.shell = shell
        self.roi = shell.roi(config.roi_dilation) if shell is not None else None
        self.rng = np.random.default_rng(seed)
        self.state = AdamState(len(scene))
        self.acc = GradientAccumulator(len(scene))
        self.iteration = 0
        self.last_densify: Optional[DensifyRecord] = None
        self.on_log = on_log
        self.history: list = []
        self._order = np.zeros(0, dtype=np.int64)

    def _next_frame(self) -> SupervisionFrame:
        pos = self.iteration % len(self.frames)
        if pos == 0 or len(self._order) != len(self.frames):
            self._order = self.rng.permutation(len(self.frames))
        return self.frames[self._order[pos]]

    def _object_region(self) -> np.ndarray:
        if self.shell is None:
            return np.ones(len(self.scene), dtype=bool)
        return self.shell.permitted(self.scene.positions)

    def densify_now(self) -> None:
        region = self._object_region()
        rec = DensifyRecord(self.iteration, 0.0, self.acc.region_mean(region), self.acc.mean().copy(),
                            self.scene.positions.copy())
        self.scene, rec.tau_all = densify(self.scene, self.acc, self.config, self.rng, self.state)
        self.last_densify = rec

    def prune_now(self) -> None:
        keep = hull_prune_mask(self.scene, self.shell, self.roi)
        if not keep.all():
            self.scene = self.scene.subset(keep)
            self.acc.remap(keep)
            self.state.remap(keep)

    def add_anchors(self, patches: Sequence) -> int:
        anchors = anchors_from_patches(patches, self.config, self.scene)
        if len(anchors):
            self.scene = self.scene.concat(anchors)
            self.acc.remap(np.ones(len(self.acc), dtype=bool), len(anchors))
            self.state.remap(np.ones(len(self.acc) - len(anchors), dtype=bool), len(anchors))
        return len(anchors)

    def train_step(self) -> dict:
        cfg = self.config
        frame = self._next_frame()
        res = compute_loss(self.scene, frame, cfg.weights, cfg.background)
        if not np.isfinite(res.loss):
            raise FloatingPointError(f"non-finite loss at iteration {self.iteration}")
        self.acc.add(res.grads)
        self.scene = step(self.scene, res.grads, cfg, self.state, self.iteration)
        self.iteration += 1
        it = self.iteration
        if cfg.densify_start <= it <= cfg.densify_until and it % cfg.densify_interval == 0:
            self.densify_now()
        if (cfg.hull_pruning and self.shell is not None and it >= cfg.densify_start
                and it % cfg.hull_prune_interval == 0):
            self.prune_now()
        rec = {"iteration": it, "loss": res.loss, "n": len(self.scene), **res.terms}
        return rec

    def run(self, until: int) -> None:
        until = min(until, self.config.total_iterations)
        while self.iteration < until:
            rec = self.train_step()
            if self.on_log is not None and (self.iteration % self.config.log_interval == 0
                                            or self.iteration == until):
                self.on_log(rec)
            self.history.append(rec["loss"])

    # checkpointing -------------------------------------------------------
    def state_arrays(self) -> dict:
        from .io import scene_to_arrays

        d = {f"scene_{k}": v for k, v in scene_to_arrays(self.scene).items()}
        d.update({f"adam_{k}": v for k, v in self.state.arrays().items()})
        d["acc_total"], d["acc_count"] = self.acc.total, self.acc.count
        d["iteration"] = np.array(self.iteration)
        d["order"] = self._order
        if self.last_densify is not None:
            r = self.last_densify
            d["dens_iteration"] = np.array(r.iteration)
            d["dens_tau"] = np.array([r.tau_all, r.tau_object])
            d["dens_means"], d["dens_positions"] = r.means, r.positions
        return d

    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def load_state(self, d: dict, rng_state: Optional[dict] = None) -> None:
        from .io import scene_from_arrays

        self.scene = scene_from_arrays({k[6:]: d[k] for k in d if k.startswith("scene_")})
        self.state = AdamState.from_arrays({k[5:]: d[k] for k in d if k.startswith("adam_")})
        self.acc = GradientAccumulator(len(self.scene))
        self.acc.total = np.array(d["acc_total"])
        self.acc.count = np.array(d["acc_count"])
        self.iteration = int(d["iteration"])
        self._order = np.array(d["order"], dtype=np.int64)
        if "dens_iteration" in d:
            tau = d["dens_tau"]
            self.last_densify = DensifyRecord(int(d["dens_iteration"]), float(tau[0]), float(tau[1]),
                                              np.array(d["dens_means"]), np.array(d["dens_positions"]))
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
