"""Reconstruction and segmentation metrics.

Reconstruction metrics compare two point sets: ``acc`` is the mean
distance from each predicted point to its nearest ground-truth point,
``comp`` the reverse, ``chamfer_l1`` their mean; precision and recall are
the fractions of predicted / ground-truth points within ``threshold`` of
the other set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dataset import FrameSet
from .errors import DomainError
from .query import Mesh, face_areas

VOID = -1
RECON_KEYS = ("acc", "comp", "chamfer_l1", "prec", "recall", "fscore", "threshold")


@dataclass
class ReconMetrics:
    acc: float
    comp: float
    chamfer_l1: float
    prec: float
    recall: float
    fscore: float
    threshold: float = 0.05

    def to_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in RECON_KEYS}


@dataclass
class SegMetrics:
    iou: np.ndarray  # (K,), NaN for classes absent from the ground truth
    acc: np.ndarray  # (K,), NaN likewise
    miou: float
    macc: float
    confusion: np.ndarray  # (K, K) rows = ground truth, cols = prediction
    void_pred: np.ndarray  # (K,) ground-truth pixels of each class predicted void

    def to_dict(self) -> dict:
        def nan_none(a):
            return [None if np.isnan(v) else float(v) for v in a]

        return {
            "miou": self.miou,
            "macc": self.macc,
            "iou": nan_none(self.iou),
            "class_acc": nan_none(self.acc),
            "confusion": self.confusion.tolist(),
        }


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` point to its nearest ``dst`` point."""
    d, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def fscore(prec: float, recall: float) -> float:
    return 2.0 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0


def recon_metrics(pred_points, gt_points, threshold: float = 0.05) -> ReconMetrics:
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise DomainError("reconstruction metrics need two nonempty point sets")
    if threshold <= 0:
        raise DomainError("threshold must be positive")
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    acc, comp = float(d_pred.mean()), float(d_gt.mean())
    prec = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    return ReconMetrics(acc, comp, 0.5 * (acc + comp), prec, recall, fscore(prec, recall), threshold)


def seg_metrics(pred_labels, gt_labels, n_classes: int, void: int = VOID) -> SegMetrics:
    """Per-class IoU / accuracy over positions whose ground truth is not void.

    A void prediction on a labeled position counts as a miss for that class.
    """
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    k = int(n_classes)
    if pred.shape != gt.shape:
        raise DomainError("prediction and ground truth differ in length")
    for name, lab in (("prediction", pred), ("ground truth", gt)):
        bad = (lab != void) & ((lab < 0) | (lab >= k))
        if np.any(bad):
            raise DomainError(f"{name} label {lab[bad][0]} outside [0, {k}) and not void")
    keep = gt != void
    if not np.any(keep):
        raise DomainError("ground truth has no labeled positions")
    p, g = pred[keep], gt[keep]
    valid = p != void
    conf = np.bincount(g[valid] * k + p[valid], minlength=k * k).reshape(k, k)
    void_pred = np.bincount(g[~valid], minlength=k)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1) + void_pred
    fp = conf.sum(axis=0) - tp
    fn = gt_count - tp
    present = gt_count > 0
    iou = np.full(k, np.nan)
    acc = np.full(k, np.nan)
    iou[present] = tp[present] / (tp + fp + fn)[present]
    acc[present] = tp[present] / gt_count[present]
    return SegMetrics(iou, acc, float(iou[present].mean()), float(acc[present].mean()), conf, void_pred)


def sample_mesh_points(mesh: Mesh, density: float = 1e4, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples, ``density`` points per square meter.

    The default is one point per square centimeter.
    """
    if mesh.is_empty:
        return np.zeros((0, 3))
    areas = face_areas(mesh)
    total = float(areas.sum())
    n = max(int(round(total * density)), 1)
    rng = np.random.default_rng(seed)
    f = rng.choice(len(areas), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.vertices[mesh.faces[f]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def observed_mask(points, frames: FrameSet, max_behind: float = 0.1, normals=None) -> np.ndarray:
    """True where some camera sees the point inside its image on a pixel with
    valid depth, and the point is no more than ``max_behind`` meters behind
    the observed surface.

    With outward ``normals`` a camera only counts when it lies in front of the
    point's tangent plane, which drops back faces hidden just behind an edge.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nrm = None if normals is None else np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    intr = frames.intrinsics
    h, w = frames.height, frames.width
    seen = np.zeros(len(pts), dtype=bool)
    for fr in frames.frames:
        r, t = fr.pose[:3, :3], fr.pose[:3, 3]
        pc = (pts - t) @ r  # world to camera
        z = pc[:, 2]
        front = z > 1e-6
        if nrm is not None:
            front &= np.einsum("ij,ij->i", nrm, t - pts) > 0
        zs = np.where(front, z, 1.0)
        u = intr.fx * pc[:, 0] / zs + intr.cx
        v = intr.fy * pc[:, 1] / zs + intr.cy
        col = np.rint(u).astype(np.int64)
        row = np.rint(v).astype(np.int64)
        inside = front & (col >= 0) & (col < w) & (row >= 0) & (row < h)
        idx = np.flatnonzero(inside & ~seen)
        if len(idx) == 0:
            continue
        d = fr.depth[row[idx], col[idx]].astype(np.float64)
        ok = (d > 0) & (z[idx] <= d + max_behind)
        seen[idx[ok]] = True
    return seen


def cull_unobserved(points, frames: FrameSet, max_behind: float = 0.1) -> np.ndarray:
    """Drop points that no training camera observed (see :func:`observed_mask`)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pts[observed_mask(pts, frames, max_behind)]


def mesh_recon_metrics(
    pred: Mesh,
    gt_points: np.ndarray,
    threshold: float = 0.05,
    density: float = 1e4,
    seed: int = 0,
    frames: FrameSet | None = None,
    max_behind: float = 0.1,
) -> ReconMetrics:
    """Sample ``pred``, optionally cull both sets by visibility, then compare."""
    pts = sample_mesh_points(pred, density, seed)
    gt = np.asarray(gt_points, dtype=np.float64)
    if frames is not None:
        pts = cull_unobserved(pts, frames, max_behind)
        gt = cull_unobserved(gt, frames, max_behind)
    return recon_metrics(pts, gt, threshold)


def transfer_labels(src_points, src_labels, dst_points, max_dist: float, void: int = VOID) -> np.ndarray:
    """Give each ``dst`` point the label of its nearest ``src`` point.

    Points farther than ``max_dist`` from every source point get ``void``.
    """
    dst = np.asarray(dst_points, dtype=np.float64).reshape(-1, 3)
    src = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0:
        return np.full(len(dst), void, dtype=np.int64)
    dist, idx = cKDTree(src).query(dst)
    return np.where(dist <= max_dist, np.asarray(src_labels)[idx], void).astype(np.int64)
