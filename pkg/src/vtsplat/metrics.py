"""Image and geometry metrics, surface extraction, evaluation reports."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .gaussians import GaussianScene
from .losses import ssim_value_and_grad

PSNR_IDENTICAL = 99.0


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; 99 dB when identical."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("psnr: images differ in shape")
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("psnr: empty mask")
        err = err[mask]
    mse = float(err.mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return min(10.0 * np.log10(1.0 / mse), PSNR_IDENTICAL)


def ssim(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    value, _ = ssim_value_and_grad(a, b, mask, need_grad=False)
    return value


def dilate_mask(mask: np.ndarray, pixels: int = 2) -> np.ndarray:
    if pixels <= 0:
        return np.asarray(mask, dtype=bool)
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=pixels)


def _check_clouds(a, b):
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer: empty point cloud")
    return a, b


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance, millimeters (input meters)."""
    a, b = _check_clouds(a, b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 1000.0 * 0.5 * (da.mean() + db.mean())


def chamfer_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_clouds(a, b)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 1000.0 * 0.5 * (d.min(1).mean() + d.min(0).mean())


def extract_surface(scene: GaussianScene, opacity_threshold: float = 0.5, box=None) -> np.ndarray:
    """Centers of opaque Gaussians inside the axis-aligned ``box`` (lo, hi),
    plus every anchored center."""
    keep = scene.opacities >= opacity_threshold
    if box is not None and len(scene):
        lo, hi = (np.asarray(b, dtype=float) for b in box)
        keep &= np.all((scene.positions >= lo) & (scene.positions <= hi), axis=1)
    keep |= scene.anchored
    if not keep.any():
        raise ValueError(f"no surface points at opacity threshold {opacity_threshold}; lower the threshold")
    return scene.positions[keep]


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class ViewScore:
    view: str
    psnr: float
    ssim: float
    psnr_masked: Optional[float] = None
    ssim_masked: Optional[float] = None


@dataclass
class EvalReport:
    views: list = field(default_factory=list)
    chamfer_mm: Optional[float] = None
    n_views: int = 0
    n_touches: int = 0
    n_gaussians: int = 0
    n_surface_points: int = 0
    config_hash: str = ""

    def summary(self) -> dict:
        def mean(key):
            vals = [getattr(v, key) for v in self.views if getattr(v, key) is not None]
            return float(np.mean(vals)) if vals else None
        return {"psnr": mean("psnr"), "ssim": mean("ssim"), "psnr_masked": mean("psnr_masked"),
                "ssim_masked": mean("ssim_masked")}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d.pop("summary", None)
        d["views"] = [ViewScore(**v) for v in d.get("views", [])]
        return cls(**d)


def score_view(name: str, rendered: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None,
               dilation: int = 2) -> ViewScore:
    s = ViewScore(name, psnr(rendered, target), ssim(rendered, target))
    if mask is not None and np.any(mask):
        m = dilate_mask(mask, dilation)
        s.psnr_masked = psnr(rendered, target, m)
        s.ssim_masked = ssim(rendered, target, m)
    return s
