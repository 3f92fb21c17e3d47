"""Training loss: color, depth, occupancy/free-space BCE and feature distillation.

Each term accepts ``return_grad=True`` and then also returns the gradient with
respect to its first (predicted) argument, which :func:`loss_and_grads` chains
through :class:`~occlang.render.RenderPass`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .grid import FieldGrads, FieldSet
from .render import RayBundle, RaySamples, RenderPass, render

ZONE_IGNORED = -1
ZONE_FREE = 0
ZONE_SURFACE = 1


@dataclass
class LossWeights:
    rgb: float = 10.0
    depth: float = 1.0
    occ: float = 10.0
    fs: float = 1.0
    sg: float = 2.0
    truncation: float = 0.05
    huber_delta: float = 1.0
    robust: bool = True  # False replaces the Huber kernel by the identity

    def __post_init__(self):
        if min(self.rgb, self.depth, self.occ, self.fs, self.sg) < 0:
            raise DomainError("loss weights must be nonnegative")
        if self.truncation <= 0 or self.huber_delta <= 0:
            raise DomainError("truncation and huber delta must be positive")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.rgb, self.depth, self.occ, self.fs, self.sg)


@dataclass
class LossReport:
    rgb: float = 0.0
    depth: float = 0.0
    occ: float = 0.0
    fs: float = 0.0
    sg: float = 0.0
    total: float = 0.0
    counts: dict = field(default_factory=dict)

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("rgb", "depth", "occ", "fs", "sg", "total")}


def loss_rgb(pred, gt, return_grad: bool = False):
    """Mean over rays of the squared L2 color error."""
    pred = np.asarray(pred)
    diff = pred - np.asarray(gt, dtype=pred.dtype)
    m = len(diff)
    if m == 0:
        return (0.0, np.zeros_like(pred)) if return_grad else 0.0
    val = float(np.sum(diff.astype(np.float64) ** 2) / m)
    if return_grad:
        return val, 2.0 * diff / m
    return val


def loss_depth(pred, gt, valid, return_grad: bool = False):
    """Mean squared depth error over rays flagged ``valid``."""
    pred = np.asarray(pred)
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return (0.0, grad) if return_grad else 0.0
    diff = np.where(valid, pred - np.asarray(gt, dtype=pred.dtype), 0.0)
    val = float(np.sum(diff.astype(np.float64) ** 2) / n)
    if return_grad:
        return val, (2.0 * diff / n).astype(pred.dtype)
    return val


def bce(pred_o, target_o):
    """Binary cross-entropy of probability ``pred_o`` against a 0/1 target."""
    p = np.asarray(pred_o, dtype=np.float64)
    t = np.asarray(target_o, dtype=np.float64)
    return -(t * np.log(p) + (1.0 - t) * np.log1p(-p))


def _softplus(x):
    return np.logaddexp(0.0, x)


def occupancy_zones(depths, gt_depth, truncation: float, valid=None) -> np.ndarray:
    """Label each sample surface band (1), free space (0) or unsupervised (-1).

    Rays without a valid ``gt_depth`` are unsupervised throughout.
    """
    z = np.asarray(depths, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64).reshape(-1, 1)
    zones = np.full(z.shape, ZONE_IGNORED, dtype=np.int8)
    has = gt > 0
    zones[(np.abs(gt - z) <= truncation) & has] = ZONE_SURFACE
    zones[(z < gt - truncation) & has] = ZONE_FREE
    if valid is not None:
        zones[~np.asarray(valid, dtype=bool)] = ZONE_IGNORED
    return zones


def _zone_means(per_sample, zones, zone):
    """Ray-mean of per-sample means over one zone; also returns the per-sample scale."""
    mask = zones == zone
    cnt = mask.sum(axis=1)
    rays = cnt > 0
    n_rays = int(rays.sum())
    scale = np.zeros(zones.shape)
    if n_rays == 0:
        return 0.0, scale, 0, 0
    scale[rays] = mask[rays] / (cnt[rays][:, None] * n_rays)
    return float(np.sum(per_sample * scale)), scale, n_rays, int(cnt.sum())


def occ_fs_from_logits(depths, logits, gt_depth, truncation: float, valid=None):
    """Occupancy and free-space BCE evaluated on logits ``(M, N)``.

    Returns ``(l_occ, l_fs, grad_occ, grad_fs, counts)`` where the gradients
    are with respect to the logits.
    """
    x = np.asarray(logits, dtype=np.float64)
    zones = occupancy_zones(depths, gt_depth, truncation, valid)
    l_occ, s_occ, r_occ, n_occ = _zone_means(_softplus(-x), zones, ZONE_SURFACE)
    l_fs, s_fs, r_fs, n_fs = _zone_means(_softplus(x), zones, ZONE_FREE)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    g_occ = s_occ * (sig - 1.0)
    g_fs = s_fs * sig
    counts = {"occ_rays": r_occ, "occ_samples": n_occ, "fs_rays": r_fs, "fs_samples": n_fs}
    return l_occ, l_fs, g_occ, g_fs, counts


def loss_occ_fs(depths, occs, gt_depth, truncation: float = 0.05, valid=None, return_grad=False):
    """``(L_occ, L_fs)`` from occupancy probabilities ``(M, N)``.

    Samples within ``truncation`` of the observed depth are pushed to 1,
    samples in front of that band to 0, samples behind it are left alone.
    Each term is a per-ray mean over its zone, averaged over the rays whose
    zone is nonempty.
    """
    o = np.asarray(occs, dtype=np.float64)
    zones = occupancy_zones(depths, gt_depth, truncation, valid)
    with np.errstate(divide="ignore"):
        l_occ, s_occ, _, _ = _zone_means(-np.log(o), zones, ZONE_SURFACE)
        l_fs, s_fs, _, _ = _zone_means(-np.log1p(-o), zones, ZONE_FREE)
    if return_grad:
        with np.errstate(divide="ignore", invalid="ignore"):
            g_occ = np.where(s_occ > 0, -s_occ / o, 0.0)
            g_fs = np.where(s_fs > 0, s_fs / (1.0 - o), 0.0)
        return l_occ, l_fs, g_occ, g_fs
    return l_occ, l_fs


def huber(x, delta: float = 1.0):
    """Huber kernel on a nonnegative argument."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= delta, 0.5 * x * x, delta * (x - 0.5 * delta))


def _huber_grad(x, delta):
    return np.where(x <= delta, x, delta)


def loss_sg(
    rendered,
    gt_feat,
    w=None,
    defined=None,
    delta: float = 1.0,
    robust: bool = True,
    return_grad: bool = False,
):
    """Confidence-weighted cosine distillation loss.

    Per ray the residual ``w * (1 - cos)^2`` goes through the Huber kernel
    (or the identity when ``robust`` is False); the loss is the mean over
    rays whose rendered feature is defined. ``gt_feat`` is normalized here,
    so any positive rescaling of it leaves the loss unchanged.
    """
    s = np.asarray(rendered)
    m = len(s)
    f = np.asarray(gt_feat, dtype=np.float64)
    fn = np.linalg.norm(f, axis=1, keepdims=True)
    f = np.divide(f, fn, out=np.zeros_like(f), where=fn > 0)
    w = np.ones(m) if w is None else np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise DomainError("confidence weights must be nonnegative")
    ok = np.ones(m, dtype=bool) if defined is None else np.asarray(defined, dtype=bool)
    ok = ok & (fn[:, 0] > 0)
    n = int(ok.sum())
    grad = np.zeros_like(s)
    if n == 0:
        return (0.0, grad) if return_grad else 0.0
    cos = np.einsum("md,md->m", s.astype(np.float64), f)
    r = 1.0 - cos
    x = w * r * r
    per_ray = huber(x, delta) if robust else x
    val = float(np.sum(per_ray[ok]) / n)
    if not return_grad:
        return val
    dx = _huber_grad(x, delta) if robust else np.ones_like(x)
    coef = np.where(ok, dx * w * 2.0 * r * -1.0 / n, 0.0)
    grad = (coef[:, None] * f).astype(s.dtype)
    return val, grad


def total_loss(terms, weights: LossWeights | None = None, counts: dict | None = None) -> LossReport:
    """Weighted sum of the five terms given as a mapping or a 5-sequence."""
    weights = weights or LossWeights()
    if isinstance(terms, dict):
        vals = [float(terms.get(k, 0.0)) for k in ("rgb", "depth", "occ", "fs", "sg")]
    else:
        vals = [float(v) for v in terms]
    lam = weights.as_tuple()
    total = sum(l * v for l, v in zip(lam, vals))
    return LossReport(*vals, total=total, counts=dict(counts or {}))


def evaluate(
    rp: RenderPass,
    bundle: RayBundle,
    weights: LossWeights,
    sg_weights=None,
    *,
    need_grad: bool = True,
) -> tuple[LossReport, FieldGrads | None]:
    """Evaluate the weighted objective on a finished :class:`RenderPass`."""
    samples = rp.samples
    valid_depth = bundle.depth_valid
    l_rgb, g_rgb = loss_rgb(rp.color, bundle.gt_color, return_grad=True)
    l_depth, g_depth = loss_depth(rp.depth, bundle.gt_depth, valid_depth, return_grad=True)

    logits_full = np.zeros(samples.valid.shape)
    logits_full[samples.valid] = rp.logits
    l_occ, l_fs, g_occ, g_fs, counts = occ_fs_from_logits(
        samples.depths, logits_full, bundle.gt_depth, weights.truncation, samples.valid
    )
    l_sg, g_sg = 0.0, None
    if bundle.gt_feature is not None and rp.sem is not None:
        l_sg, g_sg = loss_sg(
            rp.sem, bundle.gt_feature, sg_weights, rp.sem_defined,
            weights.huber_delta, weights.robust, return_grad=True,
        )
        counts["sg_rays"] = int(rp.sem_defined.sum())
    counts["rays"] = len(bundle)
    counts["depth_rays"] = int(valid_depth.sum())
    report = total_loss((l_rgb, l_depth, l_occ, l_fs, l_sg), weights, counts)
    if not need_grad:
        return report, None

    lam_rgb, lam_depth, lam_occ, lam_fs, lam_sg = weights.as_tuple()
    dt = rp.weights.dtype
    g_logits = (lam_occ * g_occ + lam_fs * g_fs)[samples.valid].astype(dt)
    grads = rp.backward(
        grad_color=(lam_rgb * g_rgb).astype(dt),
        grad_depth=(lam_depth * g_depth).astype(dt),
        grad_sem=None if g_sg is None or lam_sg == 0 else (lam_sg * g_sg).astype(dt),
        grad_logits=g_logits,
    )
    return report, grads


def loss_and_grads(
    fields: FieldSet,
    bundle: RayBundle,
    samples: RaySamples,
    weights: LossWeights,
    sg_weights=None,
    *,
    need_grad: bool = True,
    min_weight: float = 0.0,
) -> tuple[LossReport, FieldGrads | None, RenderPass]:
    """Render ``bundle`` and evaluate the weighted objective (and its gradient)."""
    rp = render(
        fields, samples, bundle.directions,
        with_semantic=bundle.gt_feature is not None, min_weight=min_weight,
    )
    report, grads = evaluate(rp, bundle, weights, sg_weights, need_grad=need_grad)
    return report, grads, rp
