"""PLY and PNG codecs and the dataset manifest."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .camera import CameraView, Pose
from .gaussians import GaussianScene

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

GAUSSIAN_PROPS = ("x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "r", "g", "b",
                  "anchored", "nx", "ny", "nz")

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}
_NAME_OF = {"i1": "char", "u1": "uchar", "<i2": "short", "<u2": "ushort", "<i4": "int", "<u4": "uint",
            "<f4": "float", "<f8": "double"}


class PlyError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# PLY -----------------------------------------------------------------------

def write_ply(path, columns: dict, comments=()) -> None:
    """Binary little-endian PLY with a single ``vertex`` element.

    ``columns`` maps property name to a 1-D array; dtype decides the PLY type.
    """
    names = list(columns)
    n = len(next(iter(columns.values()))) if names else 0
    dt = []
    for k in names:
        a = np.asarray(columns[k])
        if a.shape != (n,):
            raise ValueError(f"property {k!r} has shape {a.shape}, expected ({n},)")
        code = np.dtype(a.dtype).newbyteorder("<").str if a.dtype.itemsize > 1 else a.dtype.str.lstrip("|")
        if code not in _NAME_OF:
            raise ValueError(f"unsupported dtype {a.dtype} for property {k!r}")
        dt.append((k, code))
    rec = np.empty(n, dtype=dt)
    for k in names:
        rec[k] = columns[k]
    head = ["ply", "format binary_little_endian 1.0"]
    head += [f"comment {c}" for c in comments]
    head.append(f"element vertex {n}")
    head += [f"property {_NAME_OF[c]} {k}" for k, c in dt]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> dict:
    """Read the ``vertex`` element of a binary little-endian PLY."""
    data = Path(path).read_bytes()
    if not data.startswith(b"ply\n"):
        raise PlyError(f"{path}: missing 'ply' magic at byte offset 0")
    pos = 4
    fmt = None
    elements = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise PlyError(f"{path}: header not terminated (byte offset {pos})")
        line = data[pos:end].decode("ascii", errors="replace").strip()
        off = pos
        pos = end + 1
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        parts = line.split()
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] != "binary_little_endian":
                raise PlyError(f"{path}: unsupported format {line!r} at byte offset {off}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"{path}: bad element line {line!r} at byte offset {off}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"{path}: property before element at byte offset {off}")
            if parts[1] == "list":
                raise PlyError(f"{path}: list properties are not supported (byte offset {off})")
            if len(parts) != 3 or parts[1] not in PLY_TYPES:
                raise PlyError(f"{path}: bad property line {line!r} at byte offset {off}")
            elements[-1][2].append((parts[2], PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"{path}: unexpected header line {line!r} at byte offset {off}")
    if fmt is None:
        raise PlyError(f"{path}: no format line in header")
    body = pos
    out = None
    for name, count, props in elements:
        dt = np.dtype(props)
        need = dt.itemsize * count
        if len(data) - pos < need:
            raise PlyError(f"{path}: element {name!r} needs {need} bytes at byte offset {pos}, "
                           f"only {len(data) - pos} available")
        rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
        pos += need
        if name == "vertex":
            out = {k: rec[k].copy() for k, _ in props}
    if out is None:
        raise PlyError(f"{path}: no vertex element (body starts at byte offset {body})")
    if pos != len(data):
        raise PlyError(f"{path}: {len(data) - pos} trailing bytes at byte offset {pos}")
    return out


def scene_to_arrays(scene: GaussianScene) -> dict:
    cols = [scene.positions, scene.quats, scene.scales, scene.opacities[:, None], scene.colors]
    flat = np.concatenate(cols, axis=1)
    d = {k: flat[:, i].copy() for i, k in enumerate(GAUSSIAN_PROPS[:14])}
    d["anchored"] = scene.anchored.astype(np.uint8)
    for i, k in enumerate(("nx", "ny", "nz")):
        d[k] = scene.target_normals[:, i].copy()
    return d


def scene_from_arrays(d: dict) -> GaussianScene:
    missing = [k for k in GAUSSIAN_PROPS[:14] if k not in d]
    if missing:
        raise PlyError(f"Gaussian properties missing: {missing}")
    n = len(d["x"])
    col = lambda *ks: np.column_stack([np.asarray(d[k], dtype=float) for k in ks])
    anchored = np.asarray(d["anchored"], dtype=bool) if "anchored" in d else np.zeros(n, dtype=bool)
    tn = col("nx", "ny", "nz") if all(k in d for k in ("nx", "ny", "nz")) else np.full((n, 3), np.nan)
    return GaussianScene(col("x", "y", "z"), col("qw", "qx", "qy", "qz"), col("sx", "sy", "sz"),
                         np.asarray(d["opacity"], dtype=float), col("r", "g", "b"), anchored, tn)


def export_gaussians(scene: GaussianScene, path, comments=()) -> None:
    write_ply(path, scene_to_arrays(scene), comments)


def import_gaussians(path) -> GaussianScene:
    return scene_from_arrays(read_ply(path))


def export_points(points, path, colors=None, normals=None, extra: Optional[dict] = None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    cols = {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2]}
    if normals is not None:
        normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        cols.update(nx=normals[:, 0], ny=normals[:, 1], nz=normals[:, 2])
    if colors is not None:
        c = np.clip(np.rint(np.asarray(colors, dtype=float).reshape(-1, 3) * 255), 0, 255).astype(np.uint8)
        cols.update(red=c[:, 0], green=c[:, 1], blue=c[:, 2])
    cols.update(extra or {})
    write_ply(path, cols)


def import_points(path):
    d = read_ply(path)
    pts = np.column_stack([d["x"], d["y"], d["z"]]).astype(float)
    return pts, d


# PNG -----------------------------------------------------------------------

def _write(path, img):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def _read(path, flags=cv2.IMREAD_UNCHANGED):
    if not Path(path).is_file():
        raise FileNotFoundError(str(path))
    img = cv2.imread(str(path), flags)
    if img is None:
        raise ValueError(f"{path}: not a readable image")
    return img


def write_rgb(path, rgb: np.ndarray, bits: int = 8) -> None:
    scale = 255 if bits == 8 else 65535
    dt = np.uint8 if bits == 8 else np.uint16
    q = np.clip(np.rint(np.asarray(rgb) * scale), 0, scale).astype(dt)
    _write(path, q[..., ::-1])


def read_rgb(path) -> np.ndarray:
    img = _read(path)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{path}: expected a 3-channel image")
    scale = 255.0 if img.dtype == np.uint8 else 65535.0
    return img[..., ::-1].astype(float) / scale


def write_mask(path, mask: np.ndarray) -> None:
    _write(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    img = _read(path, cv2.IMREAD_GRAYSCALE)
    return img > 127


def write_depth(path, depth: np.ndarray) -> None:
    """16-bit PNG in millimeters; 0 marks invalid pixels."""
    d = np.asarray(depth, dtype=float)
    mm = np.where(np.isfinite(d) & (d > 0), np.rint(d * 1000.0), 0)
    _write(path, np.clip(mm, 0, 65535).astype(np.uint16))


def read_depth(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p).astype(float)
    img = _read(p)
    if img.dtype != np.uint16 or img.ndim != 2:
        raise ValueError(f"{path}: depth must be a single-channel 16-bit PNG")
    return img.astype(float) / 1000.0


def write_normals(path, normals: np.ndarray) -> None:
    """16-bit PNG storing (n + 1) / 2; invalid pixels as zeros."""
    n = np.asarray(normals, dtype=float)
    ok = np.isfinite(n).all(-1) & (np.linalg.norm(np.nan_to_num(n), axis=-1) > 0.5)
    v = np.where(ok[..., None], np.rint((n + 1) / 2 * 65535), 0)
    _write(path, np.clip(v, 0, 65535).astype(np.uint16)[..., ::-1])


def read_normals(path):
    """Decode n = 2 v - 1 and renormalize; returns (normals, valid)."""
    img = _read(path)
    if img.dtype != np.uint16 or img.ndim != 3:
        raise ValueError(f"{path}: normals must be a 3-channel 16-bit PNG")
    v = img[..., ::-1].astype(float) / 65535.0
    valid = img.any(-1)
    n = 2 * v - 1
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(valid[..., None] & (nn > 1e-6), n / np.maximum(nn, 1e-12), 0.0)
    return n, valid & (nn[..., 0] > 1e-6)


# manifest ------------------------------------------------------------------

@dataclass
class FrameEntry:
    id: str
    camera: CameraView
    color: Path
    depth: Optional[Path] = None
    depth_prior: Optional[Path] = None
    normal: Optional[Path] = None
    mask: Optional[Path] = None
    split: str = "train"


@dataclass
class TactileEntry:
    id: str
    rgb: Path
    pose: Pose
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    scene: str
    frames: list
    tactile: list = field(default_factory=list)
    labeled_cloud: Optional[Path] = None
    part_names: list = field(default_factory=list)
    gt_cloud: Optional[Path] = None
    class_hint: str = ""
    calibration: Optional[Path] = None
    extra: dict = field(default_factory=dict)
    units: str = "meters"

    def frame(self, fid: str) -> FrameEntry:
        for f in self.frames:
            if f.id == fid:
                return f
        raise KeyError(fid)


def pose_to_list(pose: Pose) -> list:
    return pose.matrix().tolist()


def _pose(entry, where):
    try:
        return Pose.from_matrix(np.asarray(entry, dtype=float))
    except (ValueError, TypeError) as exc:
        raise ManifestError(f"{where}: invalid pose ({exc})") from None


def _camera(fr, default_K, where, name):
    K = fr.get("intrinsics", default_K)
    if K is None:
        raise ManifestError(f"{where}: no intrinsics")
    try:
        return CameraView(_pose(fr["pose"], where), float(K["fx"]), float(K["fy"]), float(K["cx"]),
                          float(K["cy"]), int(K["width"]), int(K["height"]), float(K.get("near", 0.01)),
                          float(K.get("far", 100.0)), name)
    except KeyError as exc:
        raise ManifestError(f"{where}: missing key {exc}") from None


def camera_intrinsics(cam: CameraView) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height,
            "near": cam.near, "far": cam.far}


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a dataset manifest; every referenced file must exist."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"{path}: schema_version {doc.get('schema_version')!r} != {SCHEMA_VERSION}")
    if doc.get("units") != "meters":
        raise ManifestError(f"{path}: units must be declared exactly once as 'meters'")
    root = path.parent

    def ref(p, where, required=True):
        if p is None:
            if required:
                raise ManifestError(f"{where}: missing file reference")
            return None
        q = root / p
        if not q.is_file():
            raise ManifestError(f"{where}: file not found: {p}")
        return q

    default_K = doc.get("intrinsics")
    frames, seen = [], set()
    for i, fr in enumerate(doc.get("frames", [])):
        fid = str(fr.get("id", i))
        where = f"frame {fid!r}"
        if fid in seen:
            raise ManifestError(f"{where}: duplicate id")
        seen.add(fid)
        cam = _camera(fr, default_K, where, fid)
        frames.append(FrameEntry(fid, cam, ref(fr.get("color"), where), ref(fr.get("depth"), where, False),
                                 ref(fr.get("depth_prior"), where, False), ref(fr.get("normal"), where, False),
                                 ref(fr.get("mask"), where, False), str(fr.get("split", "train"))))
    if not frames:
        raise ManifestError(f"{path}: no frames")
    tactile = []
    for i, t in enumerate(doc.get("tactile", [])):
        tid = str(t.get("id", i))
        where = f"tactile {tid!r}"
        tactile.append(TactileEntry(tid, ref(t.get("rgb"), where), _pose(t.get("pose"), where),
                                    {k: v for k, v in t.items() if k not in ("id", "rgb", "pose")}))
    return DatasetManifest(root, str(doc.get("scene", "")), frames, tactile,
                           ref(doc.get("labeled_cloud"), "labeled_cloud", False), list(doc.get("part_names", [])),
                           ref(doc.get("gt_cloud"), "gt_cloud", False), str(doc.get("class_hint", "")),
                           ref(doc.get("calibration"), "calibration", False), dict(doc.get("extra", {})))


def load_frame_images(entry: FrameEntry) -> dict:
    """Read and dimension-check every image bound to a frame."""
    cam = entry.camera
    H, W = cam.height, cam.width
    out = {"color": read_rgb(entry.color)}
    if entry.depth is not None:
        out["depth"] = read_depth(entry.depth)
    if entry.depth_prior is not None:
        out["depth_prior"] = read_depth(entry.depth_prior)
    if entry.normal is not None:
        out["normal"], out["normal_valid"] = read_normals(entry.normal)
    if entry.mask is not None:
        out["mask"] = read_mask(entry.mask)
    for k, v in out.items():
        if v.shape[:2] != (H, W):
            raise ManifestError(f"frame {entry.id!r}: {k} is {v.shape[:2]}, view is {(H, W)}")
    return out


def write_manifest(path, doc: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "units": "meters", **doc}
    Path(path).write_text(json.dumps(doc, indent=1))
