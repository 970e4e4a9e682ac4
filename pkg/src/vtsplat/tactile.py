"""Gel-based tactile sensing: reflectance model, calibration, normals,
Poisson depth integration and contact extraction."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import fft, ndimage

from .camera import Pose

log = logging.getLogger(__name__)

TACTILE_H, TACTILE_W = 240, 320
GRADIENT_CLAMP = 5.0
CALIBRATION_FORMAT = "vtsplat-tactile-calibration"
CALIBRATION_VERSION = 1
MIN_LABELS = 500


@dataclass(frozen=True)
class SensorSpec:
    width: int = TACTILE_W
    height: int = TACTILE_H
    pitch: float = 62.5e-6          # meters per pixel

    @property
    def gel_size(self):
        return self.width * self.pitch, self.height * self.pitch

    def pixel_coords(self):
        """Metric (x, y) of every pixel center, origin at the gel center."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return (u - (self.width - 1) / 2) * self.pitch, (v - (self.height - 1) / 2) * self.pitch

    def normalized_coords(self):
        v, u = np.mgrid[0:self.height, 0:self.width]
        return 2 * u / (self.width - 1) - 1, 2 * v / (self.height - 1) - 1


@dataclass
class TactileFrame:
    """One gel image. ``pose`` maps world to sensor coordinates; sensor +z
    points out of the touched surface into the sensor body."""

    rgb: np.ndarray
    pose: Pose = field(default_factory=Pose.identity)
    spec: SensorSpec = field(default_factory=SensorSpec)
    frame_id: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=float)
        if self.rgb.shape != (self.spec.height, self.spec.width, 3):
            raise ValueError(f"tactile frame must be {self.spec.height}x{self.spec.width}x3, got {self.rgb.shape}")
        if not (self.spec.height, self.spec.width) == (TACTILE_H, TACTILE_W):
            log.warning("non-standard tactile resolution %dx%d", self.spec.height, self.spec.width)


@dataclass
class GradientMap:
    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self):
        self.gx = np.asarray(self.gx, dtype=float)
        self.gy = np.asarray(self.gy, dtype=float)
        if self.gx.shape != self.gy.shape:
            raise ValueError("gradient components differ in shape")
        if not (np.all(np.isfinite(self.gx)) and np.all(np.isfinite(self.gy))):
            raise ValueError("gradient map has non-finite entries")

    @classmethod
    def from_height(cls, f: np.ndarray, pitch: float) -> "GradientMap":
        gy, gx = np.gradient(np.asarray(f, dtype=float), pitch)
        return cls(gx, gy)


@dataclass
class ReflectanceModel:
    """Gel appearance as a function of surface slope and pixel position.

    Each channel responds linearly to (gx, gy) through three colored virtual
    lights, on top of a flat-gel base color and a quadratic vignette.
    """

    base: np.ndarray = field(default_factory=lambda: np.array([0.45, 0.42, 0.48]))
    lights: np.ndarray = field(default_factory=lambda: np.array([[0.18, 0.04], [-0.09, 0.16], [-0.09, -0.16]]))
    vignette: np.ndarray = field(default_factory=lambda: np.array([-0.05, -0.04, -0.06]))
    tilt: np.ndarray = field(default_factory=lambda: np.array([[0.02, -0.01], [-0.01, 0.015], [0.0, 0.02]]))

    def flat(self, spec: SensorSpec) -> np.ndarray:
        xn, yn = spec.normalized_coords()
        r2 = xn**2 + yn**2
        return (self.base + self.vignette * r2[..., None]
                + xn[..., None] * self.tilt[:, 0] + yn[..., None] * self.tilt[:, 1])

    def render(self, gm: GradientMap, spec: SensorSpec = SensorSpec(), noise: float = 0.0,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
        rgb = self.flat(spec) + gm.gx[..., None] * self.lights[:, 0] + gm.gy[..., None] * self.lights[:, 1]
        if noise > 0:
            rng = rng or np.random.default_rng(0)
            rgb = rgb + rng.normal(0.0, noise, rgb.shape)
        return np.clip(rgb, 0.0, 1.0)

    def render_height(self, f: np.ndarray, spec: SensorSpec = SensorSpec(), **kw) -> np.ndarray:
        return self.render(GradientMap.from_height(f, spec.pitch), spec, **kw)


def _poly_features(rgb: np.ndarray, xn: np.ndarray, yn: np.ndarray) -> np.ndarray:
    """Degree-2 monomials of (r, g, b, x, y), constant first."""
    z = np.column_stack([rgb.reshape(-1, 3), xn.reshape(-1), yn.reshape(-1)])
    cols = [np.ones(len(z))] + [z[:, i] for i in range(5)]
    for i in range(5):
        for j in range(i, 5):
            cols.append(z[:, i] * z[:, j])
    return np.column_stack(cols)


@dataclass
class CalibrationModel:
    coef: np.ndarray                 # (21, 2) mapping features -> (gx, gy)
    rmse: float
    n_labels: int
    spec: SensorSpec = field(default_factory=SensorSpec)

    def predict(self, rgb: np.ndarray) -> GradientMap:
        xn, yn = self.spec.normalized_coords()
        g = _poly_features(rgb, xn, yn) @ self.coef
        g = np.clip(g, -GRADIENT_CLAMP, GRADIENT_CLAMP)
        return GradientMap(g[:, 0].reshape(xn.shape), g[:, 1].reshape(xn.shape))

    def save(self, path) -> None:
        doc = {"format": CALIBRATION_FORMAT, "version": CALIBRATION_VERSION, "degree": 2,
               "inputs": ["r", "g", "b", "x", "y"], "coef": self.coef.tolist(), "rmse": self.rmse,
               "n_labels": self.n_labels,
               "sensor": {"width": self.spec.width, "height": self.spec.height, "pitch": self.spec.pitch}}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "CalibrationModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CALIBRATION_FORMAT:
            raise ValueError(f"{path}: not a tactile calibration file")
        if doc.get("version") != CALIBRATION_VERSION:
            raise ValueError(f"{path}: unsupported calibration version {doc.get('version')}")
        s = doc["sensor"]
        return cls(np.array(doc["coef"]), float(doc["rmse"]), int(doc["n_labels"]),
                   SensorSpec(int(s["width"]), int(s["height"]), float(s["pitch"])))


@dataclass
class BallPress:
    frame: TactileFrame
    center_px: tuple                 # (u, v) of the contact apex
    radius: float                    # ball radius, meters
    contact_radius_px: float         # radius of the contact circle, pixels


def sphere_cap(spec: SensorSpec, center_px, radius: float, depth: float) -> np.ndarray:
    """Indentation of a ball of ``radius`` pressed ``depth`` into the gel."""
    v, u = np.mgrid[0:spec.height, 0:spec.width]
    r2 = ((u - center_px[0])**2 + (v - center_px[1])**2) * spec.pitch**2
    h = np.sqrt(np.maximum(radius**2 - r2, 0.0)) - (radius - depth)
    return np.maximum(h, 0.0)


def sphere_gradients(spec: SensorSpec, center_px, radius: float, contact_radius_px: float):
    """Analytic slopes of the ball surface and the in-contact mask."""
    v, u = np.mgrid[0:spec.height, 0:spec.width]
    dx = (u - center_px[0]) * spec.pitch
    dy = (v - center_px[1]) * spec.pitch
    inside = (dx**2 + dy**2) < (contact_radius_px * spec.pitch)**2
    root = np.sqrt(np.maximum(radius**2 - dx**2 - dy**2, 1e-18))
    gx = np.where(inside, -dx / root, 0.0)
    gy = np.where(inside, -dy / root, 0.0)
    return gx, gy, inside


def calibrate(presses: Sequence[BallPress], spec: Optional[SensorSpec] = None) -> CalibrationModel:
    """Fit the RGB+position -> slope regressor from ball presses.

    In-contact pixels are labeled with the analytic ball slopes, the rest
    with zero slope (flat gel). At least ``MIN_LABELS`` in-contact pixels
    are required.
    """
    presses = list(presses)
    if not presses:
        raise ValueError("calibration needs at least one ball press")
    spec = spec or presses[0].frame.spec
    xn, yn = spec.normalized_coords()
    feats, targets = [], []
    n_contact = 0
    for p in presses:
        gx, gy, inside = sphere_gradients(spec, p.center_px, p.radius, p.contact_radius_px)
        # Skip a one-pixel ring at the contact edge where the slope is discontinuous.
        ring = ndimage.binary_dilation(inside, iterations=1) & ~ndimage.binary_erosion(inside, iterations=1)
        use = ~ring
        n_contact += int((inside & use).sum())
        feats.append(_poly_features(p.frame.rgb[use], xn[use], yn[use]))
        targets.append(np.column_stack([gx[use], gy[use]]))
    if n_contact < MIN_LABELS:
        raise ValueError(f"insufficient labels: {n_contact} in-contact pixels (need {MIN_LABELS})")
    A = np.concatenate(feats)
    Y = np.concatenate(targets)
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    rmse = float(np.sqrt(np.mean((A @ coef - Y) ** 2)))
    log.info("tactile calibration: %d labels (%d in contact), rmse %.4g", len(A), n_contact, rmse)
    return CalibrationModel(coef, rmse, n_contact, spec)


def rgb_to_gradients(frame: TactileFrame, model: CalibrationModel) -> GradientMap:
    return model.predict(frame.rgb)


def gradients_to_normals(gm: GradientMap) -> np.ndarray:
    n = np.stack([gm.gx, gm.gy, -np.ones_like(gm.gx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def border_mask(shape, width: int = 8) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[:width] = m[-width:] = True
    m[:, :width] = m[:, -width:] = True
    return m


def poisson_integrate(gm: GradientMap, pitch: float = SensorSpec().pitch,
                      gauge_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Least-squares height from slopes with Neumann boundaries (DCT solve).

    The additive constant is fixed by zero mean over ``gauge_mask`` (default:
    an 8-pixel border band, where the gel is assumed out of contact).
    """
    gx, gy = gm.gx, gm.gy
    H, W = gx.shape
    # Slopes on cell edges (trapezoid), zero flux through the boundary.
    ex = np.zeros((H, W + 1))
    ey = np.zeros((H + 1, W))
    ex[:, 1:-1] = 0.5 * (gx[:, 1:] + gx[:, :-1])
    ey[1:-1, :] = 0.5 * (gy[1:, :] + gy[:-1, :])
    div = (ex[:, 1:] - ex[:, :-1] + ey[1:, :] - ey[:-1, :]) * pitch
    d = fft.dctn(div, type=2, norm="ortho")
    ky = 2 * np.cos(np.pi * np.arange(H) / H) - 2
    kx = 2 * np.cos(np.pi * np.arange(W) / W) - 2
    denom = ky[:, None] + kx[None, :]
    denom[0, 0] = 1.0
    d /= denom
    d[0, 0] = 0.0
    f = fft.idctn(d, type=2, norm="ortho")
    if gauge_mask is None:
        gauge_mask = border_mask(f.shape)
    gauge_mask = np.asarray(gauge_mask, dtype=bool)
    if not gauge_mask.any():
        gauge_mask = np.ones_like(gauge_mask)
    return f - f[gauge_mask].mean()


@dataclass
class TactilePatch:
    normals: np.ndarray              # (H, W, 3) sensor frame
    depth: np.ndarray                # (H, W) gel indentation, meters
    mask: np.ndarray                 # (H, W) contact
    points: np.ndarray               # (K, 3) sensor frame, one per mask pixel
    point_normals: np.ndarray        # (K, 3) sensor frame
    pixels: np.ndarray = None        # (K, 2) (row, col)
    points_world: Optional[np.ndarray] = None
    point_normals_world: Optional[np.ndarray] = None
    normals_world: Optional[np.ndarray] = None
    frame_id: str = ""

    @property
    def in_contact(self) -> bool:
        return bool(self.mask.any())


def extract_contact(f: np.ndarray, threshold: float = 1e-4, spec: SensorSpec = SensorSpec()):
    """Contact mask (opened 3x3) and sensor-frame contact points."""
    raw = np.asarray(f) > threshold
    mask = ndimage.binary_opening(raw, structure=np.ones((3, 3), bool), border_value=1) & raw
    x, y = spec.pixel_coords()
    rows, cols = np.nonzero(mask)
    pts = np.column_stack([x[rows, cols], y[rows, cols], np.asarray(f)[rows, cols]])
    if len(pts) == 0:
        log.info("no contact at threshold %.3g m", threshold)
    return mask, pts


def process_frame(frame: TactileFrame, model: CalibrationModel, threshold: float = 1e-4) -> TactilePatch:
    gm = rgb_to_gradients(frame, model)
    normals = gradients_to_normals(gm)
    f = poisson_integrate(gm, frame.spec.pitch)
    mask, pts = extract_contact(f, threshold, frame.spec)
    rows, cols = np.nonzero(mask)
    patch = TactilePatch(normals, f, mask, pts, normals[rows, cols], np.column_stack([rows, cols]),
                         frame_id=frame.frame_id)
    return to_world(patch, frame.pose)


def to_world(patch: TactilePatch, pose: Pose) -> TactilePatch:
    """Attach world-frame points and normals; ``pose`` maps world to sensor."""
    inv = pose.inverse()
    out = TactilePatch(patch.normals, patch.depth, patch.mask, patch.points, patch.point_normals,
                       patch.pixels, frame_id=patch.frame_id)
    out.points_world = inv.apply(patch.points) if len(patch.points) else np.zeros((0, 3))
    out.point_normals_world = inv.rotate(patch.point_normals) if len(patch.point_normals) else np.zeros((0, 3))
    out.normals_world = inv.rotate(patch.normals)
    return out


def default_calibration(spec: SensorSpec = SensorSpec(), reflectance: Optional[ReflectanceModel] = None,
                        radius: float = 0.004, depth: float = 0.0005) -> CalibrationModel:
    """Calibrate against simulated ball presses at a few gel locations."""
    reflectance = reflectance or ReflectanceModel()
    a_px = np.sqrt(2 * radius * depth - depth**2) / spec.pitch
    presses = []
    for cu, cv in [(0.5, 0.5), (0.25, 0.3), (0.75, 0.3), (0.25, 0.7), (0.75, 0.7)]:
        c = (cu * (spec.width - 1), cv * (spec.height - 1))
        f = sphere_cap(spec, c, radius, depth)
        presses.append(BallPress(TactileFrame(reflectance.render_height(f, spec), spec=spec), c, radius, a_px))
    return calibrate(presses, spec)
