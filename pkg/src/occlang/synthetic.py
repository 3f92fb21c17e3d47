"""Analytic scenes with known geometry and planted per-class embeddings.

A :class:`SyntheticScene` is a list of solid boxes and spheres. Frames are
rendered by exact ray/primitive intersection, so depth, class and surface
location are known in closed form and can serve as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import FeatureSource, Frame, FrameSet, Intrinsics, camera_rays
from .errors import DomainError
from .grid import SceneBounds
from .scp import ClassPrompts


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    class_id: int

    def contains(self, p: np.ndarray, eps: float = 0.0) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((p > lo + eps) & (p < hi - eps), axis=-1)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Entry distance for rays starting outside the box (``inf`` on a miss)."""
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - o) / d
            t1 = (hi - o) / d
        tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
        # rays parallel to a slab: inside it => no constraint, outside => miss
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
        enter, leave = tmin.max(axis=-1), tmax.min(axis=-1)
        return np.where((enter <= leave) & (enter > 0), enter, np.inf)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        c, h = (lo + hi) / 2, (hi - lo) / 2
        q = np.abs(p - c) - h
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0)
        return np.abs(outside + inside)

    def sample_surface(self, density: float, rng: np.random.Generator):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        pts, normals = [], []
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            area = (hi[a] - lo[a]) * (hi[b] - lo[b])
            for side, val in ((-1, lo[axis]), (1, hi[axis])):
                n = rng.poisson(area * density)
                p = np.empty((n, 3))
                p[:, axis] = val
                p[:, a] = rng.uniform(lo[a], hi[a], n)
                p[:, b] = rng.uniform(lo[b], hi[b], n)
                nrm = np.zeros((n, 3))
                nrm[:, axis] = side
                pts.append(p)
                normals.append(nrm)
        return np.concatenate(pts), np.concatenate(normals)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    class_id: int

    def contains(self, p: np.ndarray, eps: float = 0.0) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) < self.radius - eps

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - np.asarray(self.center)
        b = np.einsum("...i,...i->...", oc, d)
        c = np.einsum("...i,...i->...", oc, oc) - self.radius**2
        disc = b * b - c
        t = -b - np.sqrt(np.maximum(disc, 0))
        return np.where((disc >= 0) & (t > 0), t, np.inf)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius)

    def sample_surface(self, density: float, rng: np.random.Generator):
        n = rng.poisson(4 * np.pi * self.radius**2 * density)
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v, v


@dataclass
class SyntheticScene:
    primitives: list
    bounds: SceneBounds
    labels: list[str]
    embeddings: np.ndarray  # (K, D) planted class embeddings
    albedo: np.ndarray  # (K, 3) in [0, 1]
    poses: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        k = len(self.labels)
        if self.embeddings.shape[0] != k or len(self.albedo) != k:
            raise DomainError("labels, embeddings and albedo must agree on the class count")
        cos = self.embeddings @ self.embeddings.T
        if k > 1 and (cos - np.eye(k) * 2).max() > 0.5 + 1e-12:
            raise DomainError("planted embeddings must have pairwise cosine <= 0.5")
        for p in self.primitives:
            if not 0 <= p.class_id < k:
                raise DomainError(f"primitive class {p.class_id} out of range")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def prompts(self) -> ClassPrompts:
        return ClassPrompts(self.embeddings.copy(), list(self.labels))

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        """1 inside any solid primitive, else 0."""
        p = np.asarray(points, dtype=np.float64)
        occ = np.zeros(p.shape[:-1], dtype=bool)
        for prim in self.primitives:
            occ |= prim.contains(p)
        return occ.astype(np.float64)

    def class_of(self, points: np.ndarray) -> np.ndarray:
        """Class of the nearest primitive surface."""
        p = np.asarray(points, dtype=np.float64)
        dist = np.stack([prim.surface_distance(p) for prim in self.primitives], axis=-1)
        cls = np.array([prim.class_id for prim in self.primitives])
        return cls[np.argmin(dist, axis=-1)]

    def raycast(self, o: np.ndarray, d: np.ndarray):
        """First-hit distance and class per ray (``inf`` / -1 on a miss)."""
        ts = np.stack([prim.intersect(o, d) for prim in self.primitives], axis=-1)
        idx = np.argmin(ts, axis=-1)
        t = np.take_along_axis(ts, idx[..., None], axis=-1)[..., 0]
        cls = np.array([prim.class_id for prim in self.primitives])[idx]
        return t, np.where(np.isfinite(t), cls, -1)

    def sample_surface(self, density: float = 1e4, seed: int = 0, with_normals: bool = False):
        """Exposed surface points ``(P, 3)`` and their classes at ``density`` per m^2.

        With ``with_normals`` the outward unit normals ``(P, 3)`` come third.
        """
        rng = np.random.default_rng(seed)
        pts, cls, nrm = [], [], []
        eps = 1e-6
        for prim in self.primitives:
            p, n = prim.sample_surface(density, rng)
            probe = p + eps * n
            exposed = (self.occupancy(probe) == 0) & self.bounds.contains(probe, tol=0)
            pts.append(p[exposed])
            nrm.append(n[exposed])
            cls.append(np.full(int(exposed.sum()), prim.class_id))
        if with_normals:
            return np.concatenate(pts), np.concatenate(cls), np.concatenate(nrm)
        return np.concatenate(pts), np.concatenate(cls)


@dataclass
class GroundTruth:
    scene: SyntheticScene
    classes: list[np.ndarray]  # per-frame (H, W) class map, -1 = miss
    flipped: list[np.ndarray]  # per-frame (H, W) bool, corrupted feature pixels

    def occupancy(self, points):
        return self.scene.occupancy(points)

    def class_of(self, points):
        return self.scene.class_of(points)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose for an OpenCV camera at ``eye`` looking at ``target``."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, fwd, eye
    return pose


def planted_embeddings(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` orthonormal ``d``-dim rows (pairwise cosine 0)."""
    if k > d:
        raise DomainError("need D >= K for orthogonal planted embeddings")
    q, _ = np.linalg.qr(rng.normal(size=(d, k)))
    return q.T.copy()


def two_box_room(
    sem_dim: int = 16,
    n_frames: int = 40,
    seed: int = 0,
    room=(3.0, 3.0, 2.2),
    margin: float = 0.05,
) -> SyntheticScene:
    """A walled room with two boxes on the floor and four classes.

    Classes: 0 wall (walls and ceiling), 1 floor, 2 and 3 the two boxes. The
    walls are solid slabs just outside the room; the scene bounds add
    ``margin`` beyond the inner wall faces.
    """
    rng = np.random.default_rng(seed)
    sx, sy, sz = room
    th = 0.5
    prims = [
        Box((-th, -th, -th), (sx + th, sy + th, 0.0), 1),  # floor slab
        Box((-th, -th, sz), (sx + th, sy + th, sz + th), 0),  # ceiling
        Box((-th, -th, 0.0), (0.0, sy + th, sz), 0),
        Box((sx, -th, 0.0), (sx + th, sy + th, sz), 0),
        Box((0.0, -th, 0.0), (sx, 0.0, sz), 0),
        Box((0.0, sy, 0.0), (sx, sy + th, sz), 0),
        Box((0.55 * sx / 3, 0.7 * sy / 3, 0.0), (1.25 * sx / 3, 1.35 * sy / 3, 0.6), 2),
        Box((1.75 * sx / 3, 1.6 * sy / 3, 0.0), (2.4 * sx / 3, 2.35 * sy / 3, 0.9), 3),
    ]
    bounds = SceneBounds(np.full(3, -margin), np.array(room) + margin)
    labels = ["wall", "floor", "box", "crate"]
    emb = planted_embeddings(len(labels), sem_dim, rng)
    albedo = np.array([[0.85, 0.82, 0.75], [0.45, 0.3, 0.2], [0.2, 0.45, 0.8], [0.8, 0.3, 0.25]])
    center = np.array([sx / 2, sy / 2])
    poses = []
    for i in range(n_frames):
        phi = 2 * np.pi * i / n_frames + rng.uniform(-0.1, 0.1)
        r = 0.25 * min(sx, sy) + rng.uniform(-0.1, 0.1)
        eye = np.array([*(center + r * np.array([np.cos(phi), np.sin(phi)])), 0.6 * sz + rng.uniform(-0.1, 0.1)])
        if i % 2 == 0:
            # look across the room and down, towards the boxes and the floor
            rt = rng.uniform(0.0, 0.35) * min(sx, sy)
            ang = phi + np.pi + rng.uniform(-0.6, 0.6)
            target = np.array([*(center + rt * np.array([np.cos(ang), np.sin(ang)])), rng.uniform(0.0, 0.5)])
        else:
            # look outward at the walls, alternating up and down
            ang = phi + rng.uniform(-0.8, 0.8)
            target = np.array(
                [*(center + 0.6 * min(sx, sy) * np.array([np.cos(ang), np.sin(ang)])),
                 sz * (0.9 if i % 4 == 1 else 0.1)]
            )
        poses.append(look_at(eye, target))
    return SyntheticScene(prims, bounds, labels, emb, albedo, poses)


def generate_synthetic(
    scene: SyntheticScene,
    n_frames: int | None = None,
    image_size: tuple[int, int] = (128, 128),
    corruption: float = 0.0,
    feature_noise: float = 0.0,
    depth_noise: float = 0.0,
    fov_deg: float = 85.0,
    seed: int = 0,
) -> tuple[FrameSet, GroundTruth]:
    """Render RGB-D frames and per-pixel feature maps of ``scene``.

    Each pixel's feature is the planted embedding of the class it sees. A
    fraction ``corruption`` of pixels (independently) is replaced by the
    embedding of a uniformly chosen wrong class; ``feature_noise`` adds
    isotropic Gaussian noise before re-normalizing.
    """
    if not 0.0 <= corruption <= 1.0:
        raise DomainError("corruption must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    poses = scene.poses if n_frames is None else scene.poses[:n_frames]
    if n_frames is not None and len(poses) < n_frames:
        raise DomainError(f"scene trajectory has only {len(scene.poses)} poses")
    h, w = image_size
    f = 0.5 * w / np.tan(np.radians(fov_deg) / 2)
    intr = Intrinsics(f, f, (w - 1) / 2, (h - 1) / 2)
    k = scene.n_classes
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    frames, classes, flips = [], [], []
    for i, pose in enumerate(poses):
        eye = pose[:3, 3]
        if not scene.bounds.contains(eye[None], tol=0)[0]:
            raise DomainError(f"camera {i} at {eye} lies outside the scene bounds")
        if scene.occupancy(eye[None])[0] > 0:
            raise DomainError(f"camera {i} at {eye} lies inside a primitive")
        o, d, scale = camera_rays(intr, pose, rr, cc)
        t, cls = scene.raycast(o, d)
        hit = np.isfinite(t)
        depth = np.where(hit, t / scale, 0.0)
        if depth_noise > 0:
            depth = np.where(hit, depth + rng.normal(0, depth_noise, depth.shape), 0.0)
        depth = depth.reshape(h, w).astype(np.float32)
        cls = cls.reshape(h, w)
        rgb = np.zeros((h, w, 3))
        rgb[cls >= 0] = scene.albedo[cls[cls >= 0]]
        rgb = np.round(rgb * 255).astype(np.uint8)

        feat_cls = cls.copy()
        flip = (rng.random((h, w)) < corruption) & (cls >= 0)
        if k > 1:
            shift = rng.integers(1, k, size=(h, w))
            feat_cls = np.where(flip, (cls + shift) % k, cls)
        feats = np.zeros((h, w, scene.embeddings.shape[1]))
        feats[feat_cls >= 0] = scene.embeddings[feat_cls[feat_cls >= 0]]
        if feature_noise > 0:
            feats += rng.normal(0, feature_noise, feats.shape)
            n = np.linalg.norm(feats, axis=-1, keepdims=True)
            feats = np.divide(feats, n, out=np.zeros_like(feats), where=n > 0)
        frames.append(
            Frame(rgb, depth, pose.copy(), FeatureSource(array=feats.astype(np.float32)), f"{i:04d}")
        )
        classes.append(cls)
        flips.append(flip)
    return FrameSet(frames, intr, scene.prompts(), scene.bounds), GroundTruth(scene, classes, flips)
