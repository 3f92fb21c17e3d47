"""Posed RGB-D frames with optional per-pixel feature maps, and their on-disk layout.

Directory layout (``NNNN`` is a zero-padded frame index)::

    intrinsics.txt      fx fy cx cy (or a 3x3 matrix, row-major)
    poses/NNNN.txt      16 floats, 4x4 camera-to-world, row-major
    rgb/NNNN.png        8-bit RGB
    depth/NNNN.png      16-bit depth in millimeters, 0 = invalid
    depth/NNNN.tiff     (alternative) 32-bit float depth in meters
    feat/NNNN.ofm       optional feature map, see ``read_feature_map``
    prompts.json        optional class prompts [{"label", "embedding"}]

Cameras follow the OpenCV convention (x right, y down, z forward) and depth
images store z-depth.
"""

from __future__ import annotations

import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, DomainError
from .grid import SceneBounds
from .scp import ClassPrompts

log = logging.getLogger(__name__)

OFM_MAGIC = b"OFM1"
_OFM_HEADER = struct.Struct("<4s3I")


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


def check_pose(pose: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise DomainError(f"pose must be 4x4, got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise DomainError("pose contains non-finite values")
    rot = pose[:3, :3]
    if np.abs(rot.T @ rot - np.eye(3)).max() > tol or abs(np.linalg.det(rot) - 1.0) > tol:
        raise DomainError("pose rotation block is not a proper rotation")
    if np.abs(pose[3] - [0, 0, 0, 1]).max() > tol:
        raise DomainError("pose bottom row must be [0, 0, 0, 1]")
    return pose


# ---------------------------------------------------------------------------
# feature maps


def write_feature_map(path, fmap: np.ndarray) -> None:
    """Write ``(H', W', D)`` float32 features: magic ``OFM1``, three uint32, data."""
    fmap = np.ascontiguousarray(fmap, dtype="<f4")
    if fmap.ndim != 3:
        raise DomainError("feature map must be H x W x D")
    with open(path, "wb") as fp:
        fp.write(_OFM_HEADER.pack(OFM_MAGIC, *fmap.shape))
        fp.write(fmap.tobytes())


def read_feature_map(path, mmap: bool = True) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fp:
        head = fp.read(_OFM_HEADER.size)
    if len(head) != _OFM_HEADER.size:
        raise DatasetError(f"{path}: truncated feature-map header")
    magic, h, w, d = _OFM_HEADER.unpack(head)
    if magic != OFM_MAGIC:
        raise DatasetError(f"{path}: bad feature-map magic {magic!r}")
    expected = _OFM_HEADER.size + 4 * h * w * d
    if path.stat().st_size != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for {h}x{w}x{d}, found {path.stat().st_size}")
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=_OFM_HEADER.size, shape=(h, w, d))
    with open(path, "rb") as fp:
        fp.seek(_OFM_HEADER.size)
        return np.frombuffer(fp.read(), dtype="<f4").reshape(h, w, d).copy()


class FeatureSource:
    """A feature map held in memory or loaded lazily (once) from disk."""

    def __init__(self, array: np.ndarray | None = None, path: Path | None = None):
        if array is None and path is None:
            raise ValueError("need an array or a path")
        self._array = array
        self.path = path
        self._lock = threading.Lock()

    @property
    def array(self) -> np.ndarray:
        if self._array is None:
            with self._lock:
                if self._array is None:
                    self._array = read_feature_map(self.path)
        return self._array

    @property
    def dim(self) -> int:
        return self.array.shape[2]


def sample_feature_map(fmap: np.ndarray, rows, cols, height: int, width: int) -> np.ndarray:
    """Bilinearly upsample ``fmap`` to ``height x width`` and read pixels ``(rows, cols)``.

    Pixel centers are aligned (half-pixel convention); at equal sizes this is
    a plain lookup.
    """
    hs, ws = fmap.shape[:2]
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if hs == height and ws == width:
        return np.asarray(fmap[rows, cols], dtype=np.float64)
    y = np.clip((rows + 0.5) * hs / height - 0.5, 0, hs - 1)
    x = np.clip((cols + 0.5) * ws / width - 0.5, 0, ws - 1)
    y0 = np.minimum(np.floor(y).astype(int), hs - 2) if hs > 1 else np.zeros_like(rows)
    x0 = np.minimum(np.floor(x).astype(int), ws - 2) if ws > 1 else np.zeros_like(cols)
    fy = (y - y0)[..., None] if hs > 1 else 0.0
    fx = (x - x0)[..., None] if ws > 1 else 0.0
    y1 = y0 + (1 if hs > 1 else 0)
    x1 = x0 + (1 if ws > 1 else 0)
    f = lambda a, b: np.asarray(fmap[a, b], dtype=np.float64)
    return (
        f(y0, x0) * (1 - fy) * (1 - fx)
        + f(y0, x1) * (1 - fy) * fx
        + f(y1, x0) * fy * (1 - fx)
        + f(y1, x1) * fy * fx
    )


# ---------------------------------------------------------------------------
# frames


@dataclass
class Frame:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid
    pose: np.ndarray  # (4, 4) camera-to-world
    features: FeatureSource | None = None
    name: str = ""

    def feature_map(self) -> np.ndarray:
        """Feature map upsampled to the image size, ``(H, W, D)``."""
        if self.features is None:
            raise DatasetError(f"frame {self.name} has no feature map")
        h, w = self.depth.shape
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return sample_feature_map(self.features.array, rr, cc, h, w)


@dataclass
class FrameSet:
    frames: list[Frame]
    intrinsics: Intrinsics
    prompts: ClassPrompts | None = None
    bounds: SceneBounds | None = None  # scene box; derived from depth when absent

    def __post_init__(self):
        if not self.frames:
            raise DatasetError("a FrameSet needs at least one frame")
        h, w = self.frames[0].depth.shape
        for fr in self.frames:
            if fr.rgb.shape != (h, w, 3) or fr.depth.shape != (h, w):
                raise DatasetError(f"frame {fr.name}: image size differs from the first frame")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].depth.shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].depth.shape[1]

    @property
    def features_available(self) -> bool:
        return all(fr.features is not None for fr in self.frames)

    @property
    def feature_dim(self) -> int | None:
        return self.frames[0].features.dim if self.features_available else None


def camera_rays(intr: Intrinsics, pose: np.ndarray, rows, cols):
    """World-space rays through pixel centers ``(rows, cols)``.

    Returns ``(origins, unit_dirs, scale)`` where ``scale`` converts z-depth
    into distance along the unit direction.
    """
    rows = np.asarray(rows, dtype=np.float64).reshape(-1)
    cols = np.asarray(cols, dtype=np.float64).reshape(-1)
    dc = np.stack([(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.ones_like(rows)], axis=1)
    scale = np.linalg.norm(dc, axis=1)
    dirs = (dc / scale[:, None]) @ pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    return origins, dirs, scale


def backproject(frame: Frame, intr: Intrinsics) -> np.ndarray:
    """World points for every valid depth pixel, ``(P, 3)``."""
    rr, cc = np.nonzero(frame.depth > 0)
    o, d, scale = camera_rays(intr, frame.pose, rr, cc)
    return o + d * (frame.depth[rr, cc].astype(np.float64) * scale)[:, None]


# ---------------------------------------------------------------------------
# disk IO


def load_prompts(path) -> ClassPrompts:
    with open(path) as fp:
        data = json.load(fp)
    if not isinstance(data, list) or not data:
        raise DatasetError(f"{path}: expected a nonempty JSON array of prompts")
    try:
        labels = [str(d["label"]) for d in data]
        emb = np.array([d["embedding"] for d in data], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: malformed prompt entry ({exc})") from exc
    return ClassPrompts(emb, labels)


def save_prompts(path, prompts: ClassPrompts) -> None:
    data = [
        {"label": lab, "embedding": [float(v) for v in emb]}
        for lab, emb in zip(prompts.labels, prompts.embeddings)
    ]
    with open(path, "w") as fp:
        json.dump(data, fp, indent=1)


def load_embedding(path) -> np.ndarray:
    """A single query embedding: a JSON array, or a prompts file with one entry."""
    with open(path) as fp:
        data = json.load(fp)
    if isinstance(data, list) and data and isinstance(data[0], dict):
        if len(data) != 1:
            raise DatasetError(f"{path}: expected exactly one embedding")
        data = data[0]["embedding"]
    if isinstance(data, dict):
        data = data["embedding"]
    emb = np.asarray(data, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(emb)
    if n == 0:
        raise DatasetError(f"{path}: zero embedding")
    return emb / n


def _read_intrinsics(path: Path) -> Intrinsics:
    try:
        vals = np.loadtxt(path, dtype=np.float64).reshape(-1)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{path}: cannot read intrinsics ({exc})") from exc
    if vals.size == 4:
        return Intrinsics(*vals)
    if vals.size == 9:
        k = vals.reshape(3, 3)
        return Intrinsics(k[0, 0], k[1, 1], k[0, 2], k[1, 2])
    raise DatasetError(f"{path}: expected 4 values (fx fy cx cy) or a 3x3 matrix")


def _read_depth(stem: Path) -> tuple[np.ndarray, Path]:
    png, tif = stem.with_suffix(".png"), stem.with_suffix(".tiff")
    if tif.exists():
        with Image.open(tif) as im:
            return np.asarray(im, dtype=np.float32).copy(), tif
    if png.exists():
        with Image.open(png) as im:
            arr = np.asarray(im)
        if arr.dtype not in (np.uint16, np.int32, np.uint32):
            raise DatasetError(f"{png}: expected a 16-bit depth image, got {arr.dtype}")
        return (arr.astype(np.float32) / 1000.0), png
    raise DatasetError(f"missing depth image for frame {stem.name}")


def load_frameset(root) -> FrameSet:
    """Load and validate a dataset directory; feature maps stay on disk until used."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    intr_path = root / "intrinsics.txt"
    if not intr_path.exists():
        raise DatasetError(f"{root}: missing intrinsics.txt")
    intr = _read_intrinsics(intr_path)
    pose_dir = root / "poses"
    posed = {p.stem for p in pose_dir.glob("*.txt")} if pose_dir.is_dir() else set()
    names = sorted(posed | {p.stem for p in (root / "rgb").glob("*.png")})
    if not names:
        raise DatasetError(f"{root}: no frames (poses/*.txt, rgb/*.png)")
    feat_dir = root / "feat"
    has_feat = feat_dir.is_dir()
    frames = []
    for name in names:
        if name not in posed:
            raise DatasetError(f"frame {name}: missing pose file {pose_dir / (name + '.txt')}")
        try:
            pose = check_pose(np.loadtxt(pose_dir / f"{name}.txt", dtype=np.float64).reshape(4, 4))
        except (ValueError, DomainError) as exc:
            raise DatasetError(f"frame {name}: invalid pose ({exc})") from exc
        rgb_path = root / "rgb" / f"{name}.png"
        if not rgb_path.exists():
            raise DatasetError(f"frame {name}: missing {rgb_path}")
        with Image.open(rgb_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        depth, dpath = _read_depth(root / "depth" / name)
        if depth.shape != rgb.shape[:2]:
            raise DatasetError(
                f"{dpath}: depth is {depth.shape[1]}x{depth.shape[0]} but rgb is {rgb.shape[1]}x{rgb.shape[0]}"
            )
        if np.any(~np.isfinite(depth)) or np.any(depth < 0):
            raise DatasetError(f"{dpath}: depth must be finite and nonnegative")
        feats = None
        if has_feat:
            fpath = feat_dir / f"{name}.ofm"
            if not fpath.exists():
                raise DatasetError(f"frame {name}: missing {fpath}")
            feats = FeatureSource(path=fpath)
        frames.append(Frame(rgb, depth, pose, feats, name))
    if not has_feat:
        log.info("%s: no feat/ directory, feature distillation disabled", root)
    prompts = load_prompts(root / "prompts.json") if (root / "prompts.json").exists() else None
    bounds = None
    if (root / "bounds.txt").exists():
        try:
            b = np.loadtxt(root / "bounds.txt", dtype=np.float64).reshape(6)
            bounds = SceneBounds(b[:3], b[3:])
        except (ValueError, DomainError) as exc:
            raise DatasetError(f"{root / 'bounds.txt'}: expected 6 numbers min xyz, max xyz ({exc})") from exc
    return FrameSet(frames, intr, prompts, bounds)


def save_frameset(frameset: FrameSet, root, depth_format: str = "tiff") -> None:
    """Write ``frameset`` in the documented layout.

    ``depth_format="tiff"`` stores float32 meters losslessly; ``"png"``
    stores 16-bit millimeters (rounded).
    """
    root = Path(root)
    for sub in ("poses", "rgb", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    intr = frameset.intrinsics
    (root / "intrinsics.txt").write_text(" ".join(repr(float(v)) for v in (intr.fx, intr.fy, intr.cx, intr.cy)) + "\n")
    if frameset.features_available:
        (root / "feat").mkdir(exist_ok=True)
    for i, fr in enumerate(frameset.frames):
        name = fr.name or f"{i:04d}"
        np.savetxt(root / "poses" / f"{name}.txt", fr.pose.reshape(1, 16), fmt="%.17g")
        Image.fromarray(fr.rgb).save(root / "rgb" / f"{name}.png")
        if depth_format == "tiff":
            Image.fromarray(fr.depth.astype(np.float32)).save(root / "depth" / f"{name}.tiff")
        elif depth_format == "png":
            mm = np.clip(np.round(fr.depth * 1000.0), 0, 65535).astype(np.uint16)
            Image.fromarray(mm).save(root / "depth" / f"{name}.png")
        else:
            raise ValueError(f"unknown depth format {depth_format!r}")
        if fr.features is not None:
            write_feature_map(root / "feat" / f"{name}.ofm", np.asarray(fr.features.array))
    if frameset.prompts is not None:
        save_prompts(root / "prompts.json", frameset.prompts)
    if frameset.bounds is not None:
        b = np.concatenate([frameset.bounds.min_corner, frameset.bounds.max_corner])
        np.savetxt(root / "bounds.txt", b.reshape(1, 6), fmt="%.17g")
