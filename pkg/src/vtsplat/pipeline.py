"""Staged reconstruction pipeline: each stage reads the artifacts of the
previous ones from a work directory and writes its own."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .camera import Pose
from .gaussians import GaussianScene
from .hull import (DepthPriorFrame, GridSpec, HullShell, SilhouetteMask, VoxelHull, build_shell, carve,
                   seed_points)
from .losses import SupervisionFrame
from .metrics import EvalReport, chamfer, config_hash, extract_surface, score_view
from .optim import TrainConfig, Trainer
from .oracle import OracleSpec, approach_point, build_scene, simulate_touch, write_dataset
from .render import render
from .tactile import CalibrationModel, SensorSpec, TactileFrame, default_calibration, process_frame
from .touch import PartLabeledCloud, PartRanking, make_ranker, plan_touches

log = logging.getLogger(__name__)

STAGE_VERSION = 1
STAGES = ("synth", "carve", "train", "select-touches", "touch-sim", "refine", "eval")
STAGE_DIRS = {"synth": "data", "carve": "carve", "train": "train", "select-touches": "touches",
              "touch-sim": "tactile", "refine": "refine", "eval": "eval"}


class ConfigError(ValueError):
    pass


class StageInputError(RuntimeError):
    pass


# configuration ---------------------------------------------------------------

@dataclass
class HullParams:
    resolution: float = 0.005
    t_interior: float = 0.005
    t_exterior: float = 0.02
    tolerance: float = 0.05
    tau_d: float = 0.01
    max_background: int = 100_000


@dataclass
class InitParams:
    opacity: float = 0.3
    knn: int = 3
    max_scale: float = 0.05


@dataclass
class TouchParams:
    n_touches: int = 10
    eps: float = 0.01
    min_pts: int = 5
    ranker: str = "mock"
    class_hint: str = ""
    press_depth: float = 0.0005
    contact_threshold: float = 1e-4
    noise: float = 0.002
    manual: bool = False

    def __post_init__(self):
        if self.ranker not in ("mock", "remote", "none"):
            raise ValueError(f"ranker must be 'mock', 'remote' or 'none', got {self.ranker!r}")
        if self.n_touches < 0 or self.min_pts < 1 or self.eps <= 0:
            raise ValueError("need n_touches >= 0, min_pts >= 1 and eps > 0")


@dataclass
class EvalParams:
    opacity_threshold: float = 0.5
    mask_dilation: int = 2
    crop_margin: float = 0.10


@dataclass
class PipelineConfig:
    profile: str = "desk"
    seed: int = 0
    dataset: str = ""
    oracle: OracleSpec = field(default_factory=OracleSpec)
    hull: HullParams = field(default_factory=HullParams)
    init: InitParams = field(default_factory=InitParams)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    touch: TouchParams = field(default_factory=TouchParams)
    eval: EvalParams = field(default_factory=EvalParams)

    @classmethod
    def for_profile(cls, profile: str = "desk", **overrides) -> "PipelineConfig":
        return cls.from_dict({"profile": profile, **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        profile = d.get("profile", "desk")
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        merged = _merge(PROFILES[profile], d)
        return _build(cls, merged, "config")

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


PROFILES = {
    "desk": {"profile": "desk", "oracle": {"width": 128, "height": 128},
             "train": {"total_iterations": 3000, "densify_until": 2000, "scene_extent": 0.44,
                       "max_gaussians": 30_000},
             "hull": {"max_background": 6000}},
    "paper": {"profile": "paper", "oracle": {"width": 1280, "height": 720, "fov_deg": 60.0},
              "train": {"total_iterations": 15000, "densify_until": 7500, "scene_extent": 0.44},
              "hull": {"max_background": 100_000}},
}


def _merge(base: dict, over: dict) -> dict:
    out = json.loads(json.dumps(base))
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    flds = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(flds))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    defaults = cls()
    for name, val in d.items():
        cur = getattr(defaults, name)
        if dataclasses.is_dataclass(cur):
            kw[name] = _build(type(cur), val, f"{where}.{name}")
        else:
            kw[name] = _coerce(val, cur, f"{where}.{name}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _coerce(val, default, where):
    if isinstance(default, bool):
        if isinstance(val, str):
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
        if isinstance(val, bool):
            return val
        raise ConfigError(f"{where}: expected a boolean, got {val!r}")
    try:
        if isinstance(default, int):
            if isinstance(val, float) and not val.is_integer():
                raise ValueError
            return int(val)
        if isinstance(default, float):
            return float(val)
        if isinstance(default, tuple):
            vals = val
            if isinstance(val, str):
                val = val.strip()
                vals = json.loads(val) if val.startswith("[") else val.split(",")
            return tuple(float(x) for x in vals)
        if isinstance(default, str):
            return str(val)
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(f"{where}: cannot interpret {val!r} as {type(default).__name__}") from None
    return val


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def scalar_keys(cfg: Optional[PipelineConfig] = None, prefix: str = "") -> list:
    """Dotted names and defaults of every scalar config key (for CLI flags)."""
    cfg = cfg or PipelineConfig()
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out += scalar_keys(v, f"{prefix}{f.name}.")
        else:
            out.append((f"{prefix}{f.name}", v))
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for key, val in (overrides or {}).items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return PipelineConfig.from_dict(d)


# artifacts -------------------------------------------------------------------

class Workspace:
    def __init__(self, root, config: PipelineConfig):
        self.root = Path(root)
        self.config = config
        self.root.mkdir(parents=True, exist_ok=True)

    def dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]

    def require(self, stage: str, needed_by: str, message: Optional[str] = None) -> dict:
        meta_path = self.dir(stage) / "stage.json"
        if not meta_path.is_file():
            raise StageInputError(message or f"{needed_by} requires the {stage!r} stage output; run `{stage}` first")
        meta = json.loads(meta_path.read_text())
        if meta.get("version") != STAGE_VERSION:
            raise StageInputError(f"{stage!r} artifact has version {meta.get('version')}, expected {STAGE_VERSION}; "
                                  f"re-run `{stage}` to migrate")
        return meta

    def finish(self, stage: str, **info) -> dict:
        meta = {"stage": stage, "version": STAGE_VERSION, "config_hash": self.config.hash(),
                "config": self.config.to_dict(), **info}
        d = self.dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        (d / "stage.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return meta

    def manifest_path(self) -> Path:
        if self.config.dataset:
            return Path(self.config.dataset)
        return self.dir("synth") / "manifest.json"

    def manifest(self, needed_by: str) -> io.DatasetManifest:
        p = self.manifest_path()
        if not p.is_file():
            raise StageInputError(f"{needed_by} requires a dataset; run `synth` or set --dataset")
        try:
            return io.load_manifest(p)
        except io.ManifestError as exc:
            raise StageInputError(str(exc)) from None


class JsonlLog:
    def __init__(self, path: Path, stage: str):
        self.fh = open(path, "a")
        self.stage = stage

    def __call__(self, rec: dict) -> None:
        rec = {"stage": self.stage, **{k: (float(v) if isinstance(v, (np.floating, float)) else v)
                                       for k, v in rec.items()}}
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.fh.flush()
        log.info("%s it=%s loss=%.5f n=%s", self.stage, rec.get("iteration"), rec.get("loss", float("nan")),
                 rec.get("n"))

    def close(self):
        self.fh.close()


# stage helpers ---------------------------------------------------------------

def _train_frames(man: io.DatasetManifest, split: str = "train") -> list:
    return [f for f in man.frames if f.split == split]


def load_supervision(man: io.DatasetManifest) -> list:
    out = []
    for fe in _train_frames(man):
        img = io.load_frame_images(fe)
        out.append(SupervisionFrame(fe.camera, img["color"], img.get("depth"), img.get("normal"),
                                    None, img.get("normal_valid"), img.get("mask"), fe.id))
    return out


def save_hull(d: Path, hull: VoxelHull, shell: HullShell) -> None:
    g = hull.grid
    np.savez_compressed(d / "hull.npz", origin=g.origin, resolution=g.resolution, dims=np.array(g.dims),
                        occupancy=hull.occupancy, sdf=shell.sdf, t_interior=shell.t_interior,
                        t_exterior=shell.t_exterior, n_components=hull.n_components)


def load_shell(d: Path) -> HullShell:
    z = np.load(d / "hull.npz")
    grid = GridSpec(z["origin"], float(z["resolution"]), tuple(int(x) for x in z["dims"]))
    hull = VoxelHull(grid, z["occupancy"].astype(bool), int(z["n_components"]))
    return HullShell(hull, float(z["t_interior"]), float(z["t_exterior"]), z["sdf"])


def initial_scene(seeds, init: InitParams) -> GaussianScene:
    pts = np.concatenate([seeds.object_points, seeds.background_points])
    cols = np.concatenate([seeds.object_colors, seeds.background_colors])
    k = min(init.knn + 1, len(pts))
    d, _ = cKDTree(pts).query(pts, k=k)
    d = d[:, 1:] if k > 1 else np.full((len(pts), 1), 0.01)
    scale = np.clip(np.sqrt(np.mean(d**2, axis=1)), 1e-4, init.max_scale)
    return GaussianScene.from_points(pts, np.clip(cols, 0, 1), scale, init.opacity)


def save_checkpoint(d: Path, trainer: Trainer, config: PipelineConfig, stage: str) -> None:
    io.export_gaussians(trainer.scene, d / "scene.ply")
    np.savez_compressed(d / "state.npz", **trainer.state_arrays())
    side = {"iteration": trainer.iteration, "config_hash": config.hash(), "stage": stage,
            "n_gaussians": len(trainer.scene), "rng": trainer.rng_state()}
    (d / "scene.json").write_text(json.dumps(side, indent=1, sort_keys=True))


def load_trainer(d: Path, frames, config: PipelineConfig, shell: HullShell) -> Trainer:
    scene = io.import_gaussians(d / "scene.ply")
    tr = Trainer(scene, frames, _train_config(config, shell), shell, seed=config.seed)
    side = json.loads((d / "scene.json").read_text())
    with np.load(d / "state.npz") as z:
        state = {k: z[k] for k in z.files}
    tr.load_state(state, side["rng"])
    return tr


def _train_config(config: PipelineConfig, shell: Optional[HullShell]) -> TrainConfig:
    return dataclasses.replace(config.train)


# stages ------------------------------------------------------------------------

def stage_synth(ws: Workspace, oracle: Optional[OracleSpec] = None) -> dict:
    spec = oracle or dataclasses.replace(ws.config.oracle, seed=ws.config.oracle.seed)
    t = time.time()
    write_dataset(ws.dir("synth"), spec)
    return ws.finish("synth", seconds=time.time() - t, oracle=spec.to_dict())


def stage_carve(ws: Workspace) -> dict:
    man = ws.manifest("carve")
    hp = ws.config.hull
    masks, priors = [], []
    for fe in _train_frames(man):
        img = io.load_frame_images(fe)
        if "mask" not in img:
            raise StageInputError(f"carve requires silhouettes; frame {fe.id!r} has none")
        masks.append(SilhouetteMask(img["mask"], fe.camera))
        depth = img.get("depth_prior", img.get("depth"))
        if depth is not None:
            priors.append(DepthPriorFrame(fe.camera, depth, img["color"], img["mask"]))
    hull = carve(masks, resolution=hp.resolution, tolerance=hp.tolerance)
    shell = build_shell(hull, hp.t_interior, hp.t_exterior)
    seeds = seed_points(shell, priors, hp.tau_d, hp.max_background)
    d = ws.dir("carve")
    d.mkdir(parents=True, exist_ok=True)
    save_hull(d, hull, shell)
    io.export_points(hull.surface_centers(), d / "hull_surface.ply")
    io.export_points(seeds.object_points, d / "seeds_object.ply", colors=seeds.object_colors)
    io.export_points(seeds.background_points, d / "seeds_background.ply", colors=seeds.background_colors)
    return ws.finish("carve", voxels=int(hull.occupancy.sum()), components=hull.n_components,
                     object_seeds=len(seeds.object_points), background_seeds=len(seeds.background_points),
                     view_stats=hull.view_stats)


def _load_seeds(d: Path):
    from .hull import SeedSet

    po, do = io.import_points(d / "seeds_object.ply")
    pb, db = io.import_points(d / "seeds_background.ply")
    col = lambda dd, n: (np.column_stack([dd["red"], dd["green"], dd["blue"]]) / 255.0 if n else np.zeros((0, 3)))
    return SeedSet(po, col(do, len(po)), pb, col(db, len(pb)))


def _run_trainer(tr: Trainer, until: int, logger: JsonlLog) -> None:
    tr.run(until)
    if not np.all(np.isfinite(tr.scene.positions)):
        raise FloatingPointError("non-finite Gaussian parameters after training")


def stage_train(ws: Workspace, until: Optional[int] = None, no_touch: bool = False) -> dict:
    ws.require("carve", "train")
    man = ws.manifest("train")
    cfg = ws.config
    shell = load_shell(ws.dir("carve"))
    seeds = _load_seeds(ws.dir("carve"))
    scene = initial_scene(seeds, cfg.init)
    frames = load_supervision(man)
    d = ws.dir("train")
    d.mkdir(parents=True, exist_ok=True)
    (d / "log.jsonl").unlink(missing_ok=True)
    logger = JsonlLog(d / "log.jsonl", "train")
    tc = _train_config(cfg, shell)
    tr = Trainer(scene, frames, tc, shell, seed=cfg.seed, on_log=logger)
    if until is None:
        until = tc.total_iterations if no_touch else tc.anchor_insert_iteration
    t = time.time()
    _run_trainer(tr, until, logger)
    logger.close()
    save_checkpoint(d, tr, cfg, "train")
    return ws.finish("train", iteration=tr.iteration, complete=tr.iteration >= tc.total_iterations,
                     n_gaussians=len(tr.scene), seconds=time.time() - t,
                     densify=None if tr.last_densify is None else
                     {"iteration": tr.last_densify.iteration, "tau_all": tr.last_densify.tau_all,
                      "tau_object": tr.last_densify.tau_object})


def stage_select(ws: Workspace) -> dict:
    ws.require("train", "select-touches", "select-touches requires trained global scene; run `train` first")
    ws.require("carve", "select-touches")
    man = ws.manifest("select-touches")
    cfg = ws.config
    shell = load_shell(ws.dir("carve"))
    with np.load(ws.dir("train") / "state.npz") as z:
        if "dens_means" not in z.files:
            raise StageInputError("select-touches requires a densification event; train past densify_start")
        means, positions = z["dens_means"], z["dens_positions"]
        tau_all, tau_obj = (float(x) for x in z["dens_tau"])
    region = shell.permitted(positions)
    cloud = None
    if man.labeled_cloud is not None:
        pts, raw = io.import_points(man.labeled_cloud)
        names = man.part_names
        cloud = PartLabeledCloud(pts, [names[i] if 0 <= i < len(names) else "unknown" for i in raw["part"]])
    ranker = make_ranker(cfg.touch.ranker)
    hint = cfg.touch.class_hint or man.class_hint
    ranking = ranker.query(hint) if ranker is not None else PartRanking(hint or "unknown")
    tp = cfg.touch
    plan = plan_touches(means, positions, tau_obj, region, cloud, ranking, tp.n_touches, tp.eps, tp.min_pts,
                        normal_fn=shell.gradient)
    touches = [{"position": c.position.tolist(), "normal": c.normal.tolist(), "gaussian_id": c.gaussian_id,
                "cluster": c.cluster, "cluster_mean_grad": c.cluster_mean_grad, "part": c.part,
                "part_rank": c.part_rank, "geo_rank": c.geo_rank} for c in plan.touches]
    d = ws.dir("select-touches")
    d.mkdir(parents=True, exist_ok=True)
    (d / "plan.json").write_text(json.dumps({"touches": touches, "shortfall": plan.shortfall,
                                             "ranking": {"label": ranking.label, "parts": list(ranking.parts)},
                                             "tau_object": tau_obj, "tau_all": tau_all}, indent=1))
    return ws.finish("select-touches", n=len(touches), shortfall=plan.shortfall)


def stage_touch_sim(ws: Workspace) -> dict:
    cfg = ws.config
    man = ws.manifest("touch-sim")
    d = ws.dir("touch-sim")
    d.mkdir(parents=True, exist_ok=True)
    spec = SensorSpec()
    entries = []
    if cfg.touch.manual:
        for te in man.tactile:
            entries.append({"id": te.id, "rgb": str(te.rgb.resolve()), "pose": io.pose_to_list(te.pose)})
        calib = man.calibration
        if calib is None:
            raise StageInputError("manual touch mode requires a calibration file in the manifest")
        CalibrationModel.load(calib).save(d / "calibration.json")
    else:
        ws.require("select-touches", "touch-sim")
        plan = json.loads((ws.dir("select-touches") / "plan.json").read_text())
        oracle = man.extra.get("oracle")
        if oracle is None:
            raise StageInputError("touch-sim needs an oracle dataset (or --touch.manual with captured frames)")
        scene = build_scene(OracleSpec(**{**oracle, "center": tuple(oracle["center"])}))
        rng = np.random.default_rng(cfg.seed + 17)
        for i, t in enumerate(plan["touches"]):
            q, _ = approach_point(scene, t["position"], t["normal"])
            res = simulate_touch(scene, q, t["normal"], spec, cfg.touch.press_depth, noise=cfg.touch.noise,
                                 rng=rng, frame_id=f"touch{i:02d}")
            io.write_rgb(d / f"touch{i:02d}.png", res.frame.rgb, bits=16)
            entries.append({"id": f"touch{i:02d}", "rgb": f"touch{i:02d}.png", "pose": io.pose_to_list(res.frame.pose),
                            "contact_point": res.contact_point.tolist(), "gt_contact_pixels": int(res.gt.mask.sum())})
        default_calibration(spec).save(d / "calibration.json")
    (d / "tactile.json").write_text(json.dumps({"frames": entries}, indent=1))
    return ws.finish("touch-sim", n=len(entries))


def load_patches(ws: Workspace) -> list:
    d = ws.dir("touch-sim")
    doc = json.loads((d / "tactile.json").read_text())
    model = CalibrationModel.load(d / "calibration.json")
    patches = []
    for e in doc["frames"]:
        rgb = io.read_rgb(d / e["rgb"])
        fr = TactileFrame(rgb, Pose.from_matrix(np.asarray(e["pose"])), model.spec, e["id"])
        p = process_frame(fr, model, ws.config.touch.contact_threshold)
        if not p.in_contact:
            log.warning("tactile frame %s shows no contact", e["id"])
        patches.append(p)
    return patches


def stage_refine(ws: Workspace) -> dict:
    ws.require("train", "refine", "refine requires trained global scene; run `train` first")
    ws.require("touch-sim", "refine")
    cfg = ws.config
    man = ws.manifest("refine")
    shell = load_shell(ws.dir("carve"))
    frames = load_supervision(man)
    tr = load_trainer(ws.dir("train"), frames, cfg, shell)
    patches = load_patches(ws)
    d = ws.dir("refine")
    d.mkdir(parents=True, exist_ok=True)
    (d / "log.jsonl").unlink(missing_ok=True)
    logger = JsonlLog(d / "log.jsonl", "refine")
    tr.on_log = logger
    tc = tr.config
    t = time.time()
    if tr.iteration < tc.anchor_insert_iteration:
        _run_trainer(tr, tc.anchor_insert_iteration, logger)
    n_anchor = tr.add_anchors(patches)
    logger({"iteration": tr.iteration, "event": "anchors", "added": n_anchor, "n": len(tr.scene)})
    pts = [p.points_world for p in patches if len(p.points_world)]
    if pts:
        io.export_points(np.concatenate(pts), d / "contacts.ply",
                         normals=np.concatenate([p.point_normals_world for p in patches if len(p.points_world)]))
    _run_trainer(tr, tc.total_iterations, logger)
    logger.close()
    save_checkpoint(d, tr, cfg, "refine")
    return ws.finish("refine", iteration=tr.iteration, anchors=n_anchor, n_touches=len(patches),
                     n_gaussians=len(tr.scene), seconds=time.time() - t)


def final_scene_stage(ws: Workspace, no_touch: bool = False) -> str:
    if not no_touch and (ws.dir("refine") / "stage.json").is_file():
        return "refine"
    meta = ws.require("train", "eval", "eval requires a trained scene; run `train` (or `refine`) first")
    if not meta.get("complete"):
        raise StageInputError("the train artifact stops at anchor insertion; run `refine`, or `train --no-touch`")
    return "train"


def stage_eval(ws: Workspace, no_touch: bool = False) -> EvalReport:
    src = final_scene_stage(ws, no_touch)
    cfg = ws.config
    man = ws.manifest("eval")
    scene = io.import_gaussians(ws.dir(src) / "scene.ply")
    n_touches = 0
    if src == "refine":
        n_touches = int(json.loads((ws.dir("refine") / "stage.json").read_text()).get("n_touches", 0))
    report = EvalReport(n_views=len(_train_frames(man)), n_touches=n_touches, n_gaussians=len(scene),
                        config_hash=cfg.hash())
    tests = _train_frames(man, "test") or _train_frames(man)
    bg = cfg.train.background
    for fe in tests:
        img = io.load_frame_images(fe)
        out = render(scene, fe.camera, background=bg)
        report.views.append(score_view(fe.id, np.clip(out.color, 0, 1), img["color"], img.get("mask"),
                                       cfg.eval.mask_dilation))
    if man.gt_cloud is not None:
        gt, _ = io.import_points(man.gt_cloud)
        # crop around the true object, not the hull, so floaters count against the method
        m = cfg.eval.crop_margin
        surf = extract_surface(scene, cfg.eval.opacity_threshold, (gt.min(0) - m, gt.max(0) + m))
        report.n_surface_points = len(surf)
        report.chamfer_mm = chamfer(surf, gt)
    d = ws.dir("eval")
    d.mkdir(parents=True, exist_ok=True)
    report.write(d / ("report_no_touch.json" if no_touch else "report.json"))
    ws.finish("eval", source=src, summary=report.summary(), chamfer_mm=report.chamfer_mm)
    return report


def export_ply(ws: Workspace, stage: str, out: Path) -> Path:
    if stage not in ("train", "refine"):
        raise ConfigError("export-ply works on the 'train' or 'refine' stage")
    ws.require(stage, "export-ply")
    io.export_gaussians(io.import_gaussians(ws.dir(stage) / "scene.ply"), out)
    return out


def run_all(ws: Workspace, no_touch: bool = False) -> EvalReport:
    """synth (unless a dataset is given) -> carve -> train -> touches -> refine -> eval."""
    if not ws.config.dataset:
        stage_synth(ws)
    stage_carve(ws)
    if no_touch:
        stage_train(ws, no_touch=True)
        return stage_eval(ws, no_touch=True)
    stage_train(ws)
    stage_select(ws)
    stage_touch_sim(ws)
    stage_refine(ws)
    return stage_eval(ws)
