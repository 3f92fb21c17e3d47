"""Ray sampling and occupancy-weighted compositing of color, depth and features.

The compositing weight of sample ``i`` is ``o_i * prod_{j<i} (1 - o_j)``: the
probability that the ray passes every earlier sample and stops at ``i``.
:func:`render` runs the forward pass over a batch of rays and returns a
:class:`RenderPass` whose :meth:`RenderPass.backward` turns upstream gradients
on the rendered quantities into :class:`~occlang.grid.FieldGrads`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .grid import (
    FieldGrads,
    FieldSet,
    SceneBounds,
    color_backward,
    color_forward,
    occupancy_logits,
    occupancy_logits_backward,
    semantic_backward,
    semantic_forward,
    sigmoid,
)

SEM_NORM_EPS = 1e-8
TERMINATION_MIN_WEIGHT = 1e-3


@dataclass
class RayBundle:
    """A batch of rays with their supervision targets.

    ``gt_depth`` is the distance along the unit direction to the observed
    surface; values ``<= 0`` mark rays without a depth measurement.
    """

    origins: np.ndarray
    directions: np.ndarray
    gt_color: np.ndarray
    gt_depth: np.ndarray
    gt_feature: np.ndarray | None = None
    frame_ids: np.ndarray | None = None

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        m = len(self.origins)
        if len(self.directions) != m:
            raise DomainError("origins and directions disagree on the ray count")
        if m and np.any(np.abs(np.linalg.norm(self.directions, axis=1) - 1.0) > 1e-6):
            raise DomainError("ray directions must be unit length")
        self.gt_color = np.asarray(self.gt_color, dtype=np.float64).reshape(m, 3)
        self.gt_depth = np.asarray(self.gt_depth, dtype=np.float64).reshape(m)
        if self.gt_feature is not None:
            self.gt_feature = np.asarray(self.gt_feature, dtype=np.float64).reshape(m, -1)
            norms = np.linalg.norm(self.gt_feature, axis=1)
            if m and np.any((norms > 0) & (np.abs(norms - 1.0) > 1e-4)):
                raise DomainError("gt_feature rows must be unit length (or zero for no feature)")
        if self.frame_ids is None:
            self.frame_ids = np.zeros(m, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def depth_valid(self) -> np.ndarray:
        return self.gt_depth > 0

    def subset(self, mask: np.ndarray) -> "RayBundle":
        return RayBundle(
            self.origins[mask],
            self.directions[mask],
            self.gt_color[mask],
            self.gt_depth[mask],
            None if self.gt_feature is None else self.gt_feature[mask],
            self.frame_ids[mask],
        )


@dataclass
class RaySamples:
    positions: np.ndarray  # (M, N, 3)
    depths: np.ndarray  # (M, N)
    valid: np.ndarray  # (M, N) bool


def ray_aabb(origins: np.ndarray, directions: np.ndarray, bounds: SceneBounds):
    """Entry/exit distances of rays against the scene box.

    Returns ``(near, far, hit)``; ``near`` is clipped at 0 so cameras inside
    the box start sampling at the origin.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bounds.min_corner - o) * inv
        t1 = (bounds.max_corner - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # axis-parallel rays: inside the slab => unbounded, outside => miss
    par = d == 0
    inside = (o >= bounds.min_corner) & (o <= bounds.max_corner)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    near = np.maximum(lo.max(axis=1), 0.0)
    far = hi.min(axis=1)
    hit = far > near + 1e-9
    return near, far, hit


def _stratified(near, far, n, rng):
    """``n`` stratified samples per row in ``[near, far]``; midpoints without ``rng``."""
    m = len(near)
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (m, n))
    else:
        u = (np.arange(n) + rng.random((m, n))) / n
    return near[:, None] + (far - near)[:, None] * u


def sample_depths(
    near: np.ndarray,
    far: np.ndarray,
    n_samples: int,
    gt_depth: np.ndarray | None = None,
    truncation: float = 0.05,
    rng: np.random.Generator | None = None,
):
    """Sample depths for a batch of rays.

    Rays with a valid ``gt_depth`` draw half of their budget inside
    ``[gt_depth - 3t, gt_depth + 3t]``; the rest is stratified over
    ``[near, far]``. Output is sorted and strictly increasing per ray;
    samples outside ``[near, far]`` are flagged invalid.
    """
    near = np.asarray(near, dtype=np.float64).reshape(-1)
    far = np.asarray(far, dtype=np.float64).reshape(-1)
    if n_samples < 2:
        raise DomainError("n_samples must be at least 2")
    if np.any(near >= far):
        raise DomainError("near must be strictly less than far")
    m = len(near)
    z = _stratified(near, far, n_samples, rng)
    if gt_depth is not None:
        gt = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
        has = gt > 0
        if np.any(has):
            n_surf = n_samples // 2
            n_strat = n_samples - n_surf
            band = 3.0 * truncation
            zs = _stratified(near[has], far[has], n_strat, rng)
            zb = _stratified(gt[has] - band, gt[has] + band, n_surf, rng)
            z = z.copy()
            z[has] = np.concatenate([zs, zb], axis=1)
    z = np.sort(z, axis=1)
    for i in range(1, n_samples):
        z[:, i] = np.maximum(z[:, i], np.nextafter(z[:, i - 1], np.inf))
    valid = (z >= near[:, None]) & (z <= far[:, None])
    return z, valid


def sample_ray(
    origin,
    direction,
    near: float,
    far: float,
    n_samples: int,
    gt_depth: float | None = None,
    truncation: float = 0.05,
    rng: np.random.Generator | None = None,
) -> RaySamples:
    """Samples for a single ray; see :func:`sample_depths`."""
    gt = None if gt_depth is None else np.array([gt_depth])
    z, valid = sample_depths(np.array([near]), np.array([far]), n_samples, gt, truncation, rng)
    o = np.asarray(origin, dtype=np.float64).reshape(1, 1, 3)
    d = np.asarray(direction, dtype=np.float64).reshape(1, 1, 3)
    return RaySamples(o + z[..., None] * d, z, valid)


def sample_bundle(
    bundle: RayBundle,
    bounds: SceneBounds,
    n_samples: int,
    truncation: float = 0.05,
    rng: np.random.Generator | None = None,
) -> tuple[RayBundle, RaySamples]:
    """Clip rays to the scene box, drop misses, and sample the survivors."""
    near, far, hit = ray_aabb(bundle.origins, bundle.directions, bounds)
    if not np.all(hit):
        bundle = bundle.subset(hit)
        near, far = near[hit], far[hit]
    z, valid = sample_depths(near, far, n_samples, bundle.gt_depth, truncation, rng)
    pos = bundle.origins[:, None, :] + z[..., None] * bundle.directions[:, None, :]
    valid &= bounds.contains(pos)
    return bundle, RaySamples(pos, z, valid)


# ---------------------------------------------------------------------------
# compositing


def compose_weights(occs: np.ndarray) -> np.ndarray:
    """``w_i = o_i * prod_{j<i} (1 - o_j)`` along the last axis."""
    o = np.asarray(occs)
    trans = np.cumprod(1.0 - o, axis=-1)
    visible = np.concatenate([np.ones_like(o[..., :1]), trans[..., :-1]], axis=-1)
    return o * visible


def compose_weights_backward(occs: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of :func:`compose_weights`.

    Uses a suffix recursion instead of dividing by ``1 - o_k``, so it stays
    exact when an occupancy saturates at 1.
    """
    o = np.asarray(occs)
    n = o.shape[-1]
    trans = np.cumprod(1.0 - o, axis=-1)
    visible = np.concatenate([np.ones_like(o[..., :1]), trans[..., :-1]], axis=-1)
    # tail[k] = sum_{i>k} g_i o_i prod_{k<j<i} (1 - o_j)
    tail = np.zeros_like(grad_w)
    for k in range(n - 2, -1, -1):
        tail[..., k] = grad_w[..., k + 1] * o[..., k + 1] + (1.0 - o[..., k + 1]) * tail[..., k + 1]
    return visible * (grad_w - tail)


@dataclass
class RenderPass:
    """Forward results plus everything the backward pass needs."""

    fields: FieldSet
    samples: RaySamples
    logits: np.ndarray  # (P,) at valid samples
    occ: np.ndarray  # (M, N), zero at invalid samples
    weights: np.ndarray  # (M, N)
    depth: np.ndarray  # (M,)
    color: np.ndarray | None = None  # (M, 3)
    sem_raw: np.ndarray | None = None  # (M, D) composited, unnormalized
    sem: np.ndarray | None = None  # (M, D) unit rows where defined
    sem_defined: np.ndarray | None = None  # (M,)
    _occ_cache: tuple = ()
    _color_cache: tuple | None = None
    _color_mask: np.ndarray | None = None
    _color_samples: np.ndarray | None = None
    _sem_cache: tuple | None = None
    _sem_mask: np.ndarray | None = None
    _sem_samples: np.ndarray | None = None

    @property
    def weight_sum(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def backward(
        self,
        grad_color: np.ndarray | None = None,
        grad_depth: np.ndarray | None = None,
        grad_sem: np.ndarray | None = None,
        grad_logits: np.ndarray | None = None,
    ) -> FieldGrads:
        """Chain upstream gradients back onto grids and decoders.

        ``grad_sem`` is taken with respect to the *normalized* semantic output;
        ``grad_logits`` (shape ``(P,)``) is a direct gradient on the
        occupancy logits of valid samples, as produced by the BCE terms.
        """
        fields = self.fields
        grads = FieldGrads.zeros(fields)
        valid = self.samples.valid
        dt = self.weights.dtype
        gw = np.zeros_like(self.weights)
        if grad_depth is not None:
            gw += np.asarray(grad_depth, dtype=dt)[:, None] * self.samples.depths.astype(dt)
        if grad_color is not None and self.color is not None:
            gC = np.asarray(grad_color, dtype=dt)
            mask = self._color_mask
            gw[mask] += np.einsum("pc,pc->p", self._color_samples, gC[np.nonzero(mask)[0]])
            gc = self.weights[mask][:, None] * gC[np.nonzero(mask)[0]]
            if len(gc):
                grads.color, grads.color_decoder = color_backward(fields, self._color_cache, gc)
        if grad_sem is not None and self.sem is not None:
            gS = np.asarray(grad_sem, dtype=dt)
            norm = np.linalg.norm(self.sem_raw, axis=1)
            gS_raw = np.zeros_like(gS)
            d = self.sem_defined
            if np.any(d):
                s = self.sem[d]
                proj = gS[d] - s * np.einsum("md,md->m", s, gS[d])[:, None]
                gS_raw[d] = proj / norm[d][:, None]
            mask = self._sem_mask
            rows = np.nonzero(mask)[0]
            gw[mask] += np.einsum("pd,pd->p", self._sem_samples, gS_raw[rows])
            gs = self.weights[mask][:, None] * gS_raw[rows]
            if len(gs):
                grads.semantic, grads.sem_decoder = semantic_backward(fields, self._sem_cache, gs)
        go = compose_weights_backward(self.occ, gw)
        o_valid = self.occ[valid]
        glog = go[valid] * o_valid * (1.0 - o_valid)
        if grad_logits is not None:
            glog = glog + np.asarray(grad_logits, dtype=dt)
        if len(glog):
            grads.geometry, grads.occ_decoder = occupancy_logits_backward(
                fields, self._occ_cache, glog
            )
        return grads


def render(
    fields: FieldSet,
    samples: RaySamples,
    directions: np.ndarray | None = None,
    *,
    with_color: bool = True,
    with_semantic: bool = True,
    min_weight: float = 0.0,
) -> RenderPass:
    """Composite depth and, optionally, color and semantic features.

    ``min_weight`` > 0 skips the color/semantic decoders at samples whose
    compositing weight is at most that value (treated as contributing zero),
    which saves most of the decoder cost during training.
    """
    dt = fields.geometry.dtype
    valid = samples.valid
    m, n = valid.shape
    pts = samples.positions[valid]
    logits, occ_cache = occupancy_logits(fields, pts) if len(pts) else (np.zeros(0, dt), ())
    occ = np.zeros((m, n), dtype=dt)
    occ[valid] = sigmoid(logits)
    weights = compose_weights(occ)
    depth = np.einsum("mn,mn->m", weights, samples.depths.astype(dt))
    out = RenderPass(fields, samples, logits, occ, weights, depth, _occ_cache=occ_cache)

    active = valid & (weights > min_weight) if min_weight > 0 else valid
    if with_color:
        if directions is None:
            raise DomainError("color rendering needs the ray directions")
        dirs = np.asarray(directions, dtype=np.float64).reshape(m, 3)
        rows = np.nonzero(active)[0]
        per_sample = np.zeros((m, n, 3), dtype=dt)
        if len(rows):
            rgb, cache = color_forward(fields, samples.positions[active], dirs[rows])
            per_sample[active] = rgb
            out._color_cache, out._color_samples = cache, rgb
        else:
            out._color_samples = np.zeros((0, 3), dt)
        out.color = np.einsum("mn,mnc->mc", weights, per_sample)
        out._color_mask = active
    if with_semantic:
        rows = np.nonzero(active)[0]
        d = fields.sem_dim
        per_sample = np.zeros((m, n, d), dtype=dt)
        if len(rows):
            s, cache = semantic_forward(fields, samples.positions[active])
            per_sample[active] = s
            out._sem_cache, out._sem_samples = cache, s
        else:
            out._sem_samples = np.zeros((0, d), dt)
        s_out = np.einsum("mn,mnd->md", weights, per_sample)
        norm = np.linalg.norm(s_out, axis=1)
        defined = norm > SEM_NORM_EPS
        unit = np.zeros_like(s_out)
        unit[defined] = s_out[defined] / norm[defined][:, None]
        out.sem_raw, out.sem, out.sem_defined, out._sem_mask = s_out, unit, defined, active
    return out


def render_color_depth(fields: FieldSet, samples: RaySamples, directions: np.ndarray):
    """Composited color ``(M, 3)`` and depth ``(M,)``."""
    rp = render(fields, samples, directions, with_semantic=False)
    return rp.color, rp.depth


def render_semantic(fields: FieldSet, samples: RaySamples):
    """Unit-normalized composited features ``(M, D)`` and a definedness mask.

    Rays whose composite norm is at most ``1e-8`` are flagged undefined and
    returned as zero rows.
    """
    rp = render(fields, samples, with_color=False)
    return rp.sem, rp.sem_defined


def ray_termination_point(depths, weights, origins, directions):
    """Expected stopping point ``origin + D(r) * direction`` per ray.

    Returns ``(points, ok)``; ``ok`` is False where the total weight is
    below ``1e-3`` and the point carries no meaning. Single-ray inputs give
    ``None`` instead of a point in that case.
    """
    z = np.asarray(depths, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    single = z.ndim == 1
    z, w = np.atleast_2d(z), np.atleast_2d(w)
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    wsum = w.sum(axis=1)
    ok = wsum > TERMINATION_MIN_WEIGHT
    pts = o + (w * z).sum(axis=1)[:, None] * d
    if single:
        return pts[0] if ok[0] else None
    return pts, ok
