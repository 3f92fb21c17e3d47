"""Dense multi-resolution feature grids and the three small decoders.

A :class:`FieldSet` bundles one grid per field (geometry, color, semantics)
with its decoder. Every differentiable piece here comes as a forward
function that returns a cache plus a matching backward function, so the
renderer and the objective can chain gradients by hand.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .errors import CheckpointError, DomainError

# Corner offsets of a unit cell, ordered (dx, dy, dz) with dz fastest.
_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)

_BOUNDS_TOL = 1e-9


@dataclass(frozen=True)
class SceneBounds:
    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise DomainError("scene bounds must be finite")
        if np.any(hi <= lo):
            raise DomainError(f"max_corner {hi} must exceed min_corner {lo} on every axis")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, points: np.ndarray, tol: float = _BOUNDS_TOL) -> np.ndarray:
        """Boolean mask of points inside the box (inclusive, with a tiny slack)."""
        pts = np.asarray(points)
        slack = tol * max(1.0, float(self.extent.max()))
        return np.all((pts >= self.min_corner - slack) & (pts <= self.max_corner + slack), axis=-1)


@dataclass
class GridLevel:
    """One dense lattice of per-vertex features.

    ``features`` has shape ``(n_vertices, feat_dim)``; vertex ``(ix, iy, iz)``
    lives at row ``(ix * ry + iy) * rz + iz``.
    """

    resolution: tuple[int, int, int]
    voxel_size: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise DomainError(f"grid resolution must be >= 2 on every axis, got {self.resolution}")
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if self.features.ndim != 2 or self.features.shape[0] != self.n_vertices:
            raise DomainError(
                f"features must have shape ({self.n_vertices}, C), got {self.features.shape}"
            )
        if self.features.shape[1] < 1:
            raise DomainError("feat_dim must be positive")

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_vertices(self) -> int:
        rx, ry, rz = self.resolution
        return rx * ry * rz


@dataclass
class InterpCache:
    """Corner indices and trilinear weights per level, kept for the backward pass."""

    indices: list[np.ndarray]
    weights: list[np.ndarray]
    n_points: int


class MultiResGrid:
    """Coarse-to-fine stack of :class:`GridLevel` sharing one bounding box."""

    def __init__(self, levels: Sequence[GridLevel], bounds: SceneBounds):
        if not levels:
            raise DomainError("a MultiResGrid needs at least one level")
        for prev, nxt in zip(levels, levels[1:]):
            if any(b < a for a, b in zip(prev.resolution, nxt.resolution)):
                raise DomainError("level resolutions must be non-decreasing from coarse to fine")
        for lvl in levels:
            span = lvl.voxel_size * (np.array(lvl.resolution) - 1)
            if not np.allclose(span, bounds.extent, rtol=1e-9, atol=1e-12):
                raise DomainError("voxel_size * (resolution - 1) must span the scene bounds")
        self.levels = list(levels)
        self.bounds = bounds

    @classmethod
    def create(
        cls,
        bounds: SceneBounds,
        resolutions: Sequence[Sequence[int]],
        feat_dims: Sequence[int],
        rng: np.random.Generator | None = None,
        init_scale: float = 1e-2,
        dtype=np.float32,
    ) -> "MultiResGrid":
        """Allocate a grid with features drawn from ``uniform(-init_scale, init_scale)``."""
        rng = np.random.default_rng(0) if rng is None else rng
        levels = []
        for res, c in zip(resolutions, feat_dims):
            res = tuple(int(r) for r in res)
            voxel = bounds.extent / (np.array(res, dtype=np.float64) - 1)
            n = res[0] * res[1] * res[2]
            feats = rng.uniform(-init_scale, init_scale, size=(n, int(c))).astype(dtype)
            levels.append(GridLevel(res, voxel, feats))
        return cls(levels, bounds)

    @property
    def feat_dim(self) -> int:
        return sum(lvl.feat_dim for lvl in self.levels)

    @property
    def dtype(self):
        return self.levels[0].features.dtype

    def check_inside(self, points: np.ndarray) -> None:
        inside = self.bounds.contains(points)
        if not np.all(inside):
            bad = np.asarray(points).reshape(-1, 3)[~inside.reshape(-1)][0]
            raise DomainError(f"query point {bad} lies outside the scene bounds")

    def interpolate(self, points: np.ndarray) -> tuple[np.ndarray, InterpCache]:
        """Concatenated per-level trilinear features for ``(P, 3)`` points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.check_inside(pts)
        out = np.empty((pts.shape[0], self.feat_dim), dtype=self.dtype)
        cache = InterpCache([], [], pts.shape[0])
        col = 0
        for lvl in self.levels:
            idx, w = _corner_weights(pts, self.bounds.min_corner, lvl)
            gathered = lvl.features[idx]  # (P, 8, C)
            out[:, col : col + lvl.feat_dim] = np.einsum("pk,pkc->pc", w, gathered)
            cache.indices.append(idx)
            cache.weights.append(w)
            col += lvl.feat_dim
        return out, cache

    def backward(self, cache: InterpCache, grad: np.ndarray) -> list["SparseRows"]:
        """Scatter ``dL/dfeatures`` back onto the vertices of every level."""
        grads = []
        col = 0
        for lvl, idx, w in zip(self.levels, cache.indices, cache.weights):
            g = grad[:, col : col + lvl.feat_dim]
            flat_idx = idx.reshape(-1)
            rows = np.flatnonzero(np.bincount(flat_idx, minlength=lvl.n_vertices))
            dense = np.empty((lvl.n_vertices, lvl.feat_dim), dtype=lvl.features.dtype)
            for c in range(lvl.feat_dim):
                contrib = (w * g[:, c : c + 1]).reshape(-1)
                dense[:, c] = np.bincount(flat_idx, weights=contrib, minlength=lvl.n_vertices)
            grads.append(SparseRows(rows, dense[rows]))
            col += lvl.feat_dim
        return grads


@dataclass
class SparseRows:
    """Gradient restricted to the rows (vertices) that were touched."""

    rows: np.ndarray
    values: np.ndarray

    def to_dense(self, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows, self.values.shape[1]), dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


def _corner_weights(pts: np.ndarray, origin: np.ndarray, lvl: GridLevel):
    """Row indices ``(P, 8)`` of the enclosing cell's corners and their trilinear weights."""
    res = np.array(lvl.resolution)
    u = (pts - origin) / lvl.voxel_size
    base = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    frac = np.clip(u - base, 0.0, 1.0).astype(lvl.features.dtype)
    first = (base[:, 0] * res[1] + base[:, 1]) * res[2] + base[:, 2]
    offsets = (_CORNERS[:, 0] * res[1] + _CORNERS[:, 1]) * res[2] + _CORNERS[:, 2]
    idx = first[:, None] + offsets[None, :]
    wx, wy, wz = (np.stack([1 - frac[:, a], frac[:, a]], axis=1) for a in range(3))
    w = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    return idx, w


def query_concat(grid: MultiResGrid, p: np.ndarray) -> np.ndarray:
    """Concatenated multi-level feature at one point ``(3,)`` or many ``(P, 3)``."""
    p = np.asarray(p, dtype=np.float64)
    feats, _ = grid.interpolate(p.reshape(-1, 3))
    return feats[0] if p.ndim == 1 else feats


# ---------------------------------------------------------------------------
# decoders


@dataclass
class DecoderParams:
    """Fully connected net: ``tanh`` on hidden layers, linear final layer."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    output_dim: int

    def __post_init__(self):
        if not self.layers:
            raise DomainError("decoder needs at least one layer")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise DomainError(f"decoder layer shapes do not chain: {w0.shape} -> {w1.shape}")
        for w, b in self.layers:
            if b.shape != (w.shape[1],):
                raise DomainError(f"bias shape {b.shape} does not match weight {w.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DomainError("decoder parameters must be finite")
        if self.layers[-1][0].shape[1] != self.output_dim:
            raise DomainError(
                f"decoder emits {self.layers[-1][0].shape[1]} values, expected {self.output_dim}"
            )

    @classmethod
    def create(
        cls,
        in_dim: int,
        hidden: Sequence[int],
        out_dim: int,
        rng: np.random.Generator,
        out_bias: float = 0.0,
        dtype=np.float32,
    ) -> "DecoderParams":
        dims = [in_dim, *hidden, out_dim]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)).astype(dtype)
            layers.append((w, np.zeros(b, dtype=dtype)))
        layers[-1][1][:] = out_bias
        return cls(layers, out_dim)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i < len(self.layers) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(
        self, acts: list[np.ndarray], grad_out: np.ndarray, need_input_grad: bool = True
    ) -> tuple[np.ndarray | None, list[tuple[np.ndarray, np.ndarray]]]:
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        g = grad_out
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            w, _ = self.layers[i]
            if i < n - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads.append((acts[i].T @ g, g.sum(axis=0)))
            if i > 0 or need_input_grad:
                g = g @ w.T
        grads.reverse()
        return (g if need_input_grad else None), grads

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def sigmoid(x):
    # tanh form avoids overflow warnings and is cheaper than exp in numpy.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# the bundle of fields


@dataclass
class FieldConfig:
    """Sizes used by :meth:`FieldSet.create`.

    The coarsest level's voxel is ``diagonal / base_divisions``; each finer
    level halves it.
    """

    n_levels: int = 4
    base_divisions: int = 16
    geo_feat: int = 4
    color_feat: int = 4
    sem_feat: int = 8
    hidden: tuple[int, ...] = (64, 64)
    init_occupancy: float = 0.1
    init_scale: float = 1e-2
    resolutions: tuple[tuple[int, int, int], ...] | None = None

    def level_resolutions(self, bounds: SceneBounds) -> list[tuple[int, int, int]]:
        if self.resolutions is not None:
            return [tuple(int(v) for v in r) for r in self.resolutions]
        out = []
        for lvl in range(self.n_levels):
            target = bounds.diagonal / self.base_divisions / (2**lvl)
            res = np.maximum(np.ceil(bounds.extent / target - 1e-9).astype(int) + 1, 2)
            out.append(tuple(int(r) for r in res))
        return out


@dataclass
class FieldSet:
    geometry: MultiResGrid
    color: MultiResGrid
    semantic: MultiResGrid
    occ_decoder: DecoderParams
    color_decoder: DecoderParams
    sem_decoder: DecoderParams
    sem_dim: int

    def __post_init__(self):
        if self.occ_decoder.output_dim != 1:
            raise DomainError("occupancy decoder must emit exactly one logit")
        if self.color_decoder.output_dim != 3:
            raise DomainError("color decoder must emit 3 channels")
        if self.sem_decoder.output_dim != self.sem_dim:
            raise DomainError(
                f"semantic decoder emits {self.sem_decoder.output_dim} values but D = {self.sem_dim}"
            )
        if self.occ_decoder.in_dim != self.geometry.feat_dim:
            raise DomainError("occupancy decoder input does not match geometry features")
        if self.color_decoder.in_dim != self.color.feat_dim + 3:
            raise DomainError("color decoder input must be color features + view direction")
        if self.sem_decoder.in_dim != self.semantic.feat_dim:
            raise DomainError("semantic decoder input does not match semantic features")

    @classmethod
    def create(
        cls,
        bounds: SceneBounds,
        sem_dim: int,
        config: FieldConfig | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "FieldSet":
        config = config or FieldConfig()
        rng = np.random.default_rng(0) if rng is None else rng
        res = config.level_resolutions(bounds)
        n = len(res)

        def grid(c):
            return MultiResGrid.create(bounds, res, [c] * n, rng, config.init_scale, dtype)

        geometry, color, semantic = grid(config.geo_feat), grid(config.color_feat), grid(config.sem_feat)
        p0 = config.init_occupancy
        occ = DecoderParams.create(
            geometry.feat_dim, config.hidden, 1, rng, out_bias=math.log(p0 / (1 - p0)), dtype=dtype
        )
        col = DecoderParams.create(color.feat_dim + 3, config.hidden, 3, rng, dtype=dtype)
        sem = DecoderParams.create(semantic.feat_dim, config.hidden, sem_dim, rng, dtype=dtype)
        return cls(geometry, color, semantic, occ, col, sem, sem_dim)

    @property
    def bounds(self) -> SceneBounds:
        return self.geometry.bounds

    @property
    def grids(self) -> tuple[MultiResGrid, MultiResGrid, MultiResGrid]:
        return self.geometry, self.color, self.semantic

    @property
    def decoders(self) -> tuple[DecoderParams, DecoderParams, DecoderParams]:
        return self.occ_decoder, self.color_decoder, self.sem_decoder

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Every trainable array, in checkpoint declaration order."""
        out = []
        for gname, g in zip(("geometry", "color", "semantic"), self.grids):
            for i, lvl in enumerate(g.levels):
                out.append((f"{gname}.level{i}", lvl.features))
        for dname, d in zip(("occ_decoder", "color_decoder", "sem_decoder"), self.decoders):
            for i, (w, b) in enumerate(d.layers):
                out.append((f"{dname}.w{i}", w))
                out.append((f"{dname}.b{i}", b))
        return out

    def copy(self) -> "FieldSet":
        def cgrid(g):
            return MultiResGrid(
                [GridLevel(l.resolution, l.voxel_size.copy(), l.features.copy()) for l in g.levels],
                g.bounds,
            )

        def cdec(d):
            return DecoderParams([(w.copy(), b.copy()) for w, b in d.layers], d.output_dim)

        return FieldSet(
            cgrid(self.geometry), cgrid(self.color), cgrid(self.semantic),
            cdec(self.occ_decoder), cdec(self.color_decoder), cdec(self.sem_decoder), self.sem_dim,
        )

    def astype(self, dtype) -> "FieldSet":
        out = self.copy()
        for g in out.grids:
            for lvl in g.levels:
                lvl.features = lvl.features.astype(dtype)
        for d in out.decoders:
            d.layers = [(w.astype(dtype), b.astype(dtype)) for w, b in d.layers]
        return out


@dataclass
class FieldGrads:
    """Gradients mirroring a :class:`FieldSet`; grid gradients are row-sparse."""

    geometry: list[SparseRows]
    color: list[SparseRows]
    semantic: list[SparseRows]
    occ_decoder: list[tuple[np.ndarray, np.ndarray]]
    color_decoder: list[tuple[np.ndarray, np.ndarray]]
    sem_decoder: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, fields: FieldSet) -> "FieldGrads":
        def zgrid(g):
            return [
                SparseRows(np.zeros(0, dtype=np.int64), np.zeros((0, l.feat_dim), l.features.dtype))
                for l in g.levels
            ]

        def zdec(d):
            return [(np.zeros_like(w), np.zeros_like(b)) for w, b in d.layers]

        return cls(
            zgrid(fields.geometry), zgrid(fields.color), zgrid(fields.semantic),
            zdec(fields.occ_decoder), zdec(fields.color_decoder), zdec(fields.sem_decoder),
        )

    def dense(self, fields: FieldSet) -> list[tuple[str, np.ndarray]]:
        """Dense gradients aligned with :meth:`FieldSet.parameters`."""
        out = []
        for gname, g, gg in zip(
            ("geometry", "color", "semantic"), fields.grids, (self.geometry, self.color, self.semantic)
        ):
            for i, (lvl, sr) in enumerate(zip(g.levels, gg)):
                out.append((f"{gname}.level{i}", sr.to_dense(lvl.n_vertices)))
        for dname, dg in zip(
            ("occ_decoder", "color_decoder", "sem_decoder"),
            (self.occ_decoder, self.color_decoder, self.sem_decoder),
        ):
            for i, (w, b) in enumerate(dg):
                out.append((f"{dname}.w{i}", w))
                out.append((f"{dname}.b{i}", b))
        return out


# ---------------------------------------------------------------------------
# pointwise field evaluation


def occupancy_logits(fields: FieldSet, points: np.ndarray):
    feats, icache = fields.geometry.interpolate(points)
    logits, acts = fields.occ_decoder.forward(feats)
    return logits[:, 0], (icache, acts)


def occupancy_logits_backward(fields: FieldSet, cache, grad_logits: np.ndarray):
    icache, acts = cache
    gfeat, dgrads = fields.occ_decoder.backward(acts, grad_logits[:, None])
    return fields.geometry.backward(icache, gfeat), dgrads


def color_forward(fields: FieldSet, points: np.ndarray, dirs: np.ndarray):
    feats, icache = fields.color.interpolate(points)
    x = np.concatenate([feats, np.asarray(dirs, dtype=feats.dtype).reshape(-1, 3)], axis=1)
    raw, acts = fields.color_decoder.forward(x)
    rgb = sigmoid(raw)
    return rgb, (icache, acts, rgb)


def color_backward(fields: FieldSet, cache, grad_rgb: np.ndarray):
    icache, acts, rgb = cache
    graw = grad_rgb * rgb * (1.0 - rgb)
    gx, dgrads = fields.color_decoder.backward(acts, graw)
    return fields.color.backward(icache, gx[:, : fields.color.feat_dim]), dgrads


def semantic_forward(fields: FieldSet, points: np.ndarray):
    feats, icache = fields.semantic.interpolate(points)
    out, acts = fields.sem_decoder.forward(feats)
    return out, (icache, acts)


def semantic_backward(fields: FieldSet, cache, grad_out: np.ndarray):
    icache, acts = cache
    gfeat, dgrads = fields.sem_decoder.backward(acts, grad_out)
    return fields.semantic.backward(icache, gfeat), dgrads


def occupancy(fields: FieldSet, p: np.ndarray) -> np.ndarray:
    """Occupancy probability at one point or a ``(P, 3)`` batch."""
    p = np.asarray(p, dtype=np.float64)
    logits, _ = occupancy_logits(fields, p.reshape(-1, 3))
    o = sigmoid(logits.astype(np.float64))
    return o[0] if p.ndim == 1 else o


def color(fields: FieldSet, p: np.ndarray, d: np.ndarray) -> np.ndarray:
    """RGB in ``[0, 1]^3`` seen from unit view direction ``d``."""
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    pts, dirs = p.reshape(-1, 3), d.reshape(-1, 3)
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DomainError("view direction must be unit length")
    if len(dirs) == 1 and len(pts) > 1:
        dirs = np.broadcast_to(dirs, pts.shape)
    rgb, _ = color_forward(fields, pts, dirs)
    return rgb[0] if p.ndim == 1 else rgb


def semantic(fields: FieldSet, p: np.ndarray) -> np.ndarray:
    """Unnormalized D-dim semantic feature at one point or a batch."""
    p = np.asarray(p, dtype=np.float64)
    out, _ = semantic_forward(fields, p.reshape(-1, 3))
    return out[0] if p.ndim == 1 else out


# ---------------------------------------------------------------------------
# checkpoint blob

MAGIC = b"OOC1"


def write_fields(fp: BinaryIO, fields: FieldSet) -> None:
    """Serialize ``fields``; see ``docs/formats.md`` for the byte layout."""
    levels = fields.geometry.levels
    hdr = [MAGIC, struct.pack("<I", len(levels))]
    for lvl in levels:
        hdr.append(struct.pack("<3I", *lvl.resolution))
    for g in fields.grids:
        hdr.append(struct.pack(f"<{len(levels)}I", *(l.feat_dim for l in g.levels)))
    hdr.append(struct.pack("<I", fields.sem_dim))
    b = fields.bounds
    hdr.append(struct.pack("<6d", *b.min_corner, *b.max_corner))
    for d in fields.decoders:
        hdr.append(struct.pack("<I", len(d.layers)))
        for w, _ in d.layers:
            hdr.append(struct.pack("<2I", *w.shape))
    fp.write(b"".join(hdr))
    for _, arr in fields.parameters():
        fp.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_fields(fp: BinaryIO) -> FieldSet:
    def take(fmt):
        size = struct.calcsize(fmt)
        buf = fp.read(size)
        if len(buf) != size:
            raise CheckpointError("checkpoint truncated in header")
        return struct.unpack(fmt, buf)

    if fp.read(4) != MAGIC:
        raise CheckpointError("not an OOC1 checkpoint (bad magic)")
    (n_levels,) = take("<I")
    if not 1 <= n_levels <= 64:
        raise CheckpointError(f"implausible level count {n_levels}")
    res = [take("<3I") for _ in range(n_levels)]
    feat_dims = [take(f"<{n_levels}I") for _ in range(3)]
    (sem_dim,) = take("<I")
    bvals = take("<6d")
    bounds = SceneBounds(np.array(bvals[:3]), np.array(bvals[3:]))
    dec_shapes = []
    for _ in range(3):
        (n_layers,) = take("<I")
        dec_shapes.append([take("<2I") for _ in range(n_layers)])

    def arr(shape):
        count = int(np.prod(shape))
        buf = fp.read(4 * count)
        if len(buf) != 4 * count:
            raise CheckpointError("checkpoint truncated in data section")
        return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)

    grids = []
    for dims in feat_dims:
        lvls = []
        for r, c in zip(res, dims):
            n = r[0] * r[1] * r[2]
            lvls.append(GridLevel(r, bounds.extent / (np.array(r) - 1.0), arr((n, c))))
        grids.append(MultiResGrid(lvls, bounds))
    decs = []
    for shapes in dec_shapes:
        layers = [(arr(s), arr((s[1],))) for s in shapes]
        decs.append(DecoderParams(layers, shapes[-1][1]))
    return FieldSet(*grids, *decs, sem_dim)


def save_fields(path, fields: FieldSet) -> None:
    with open(path, "wb") as fp:
        write_fields(fp, fields)


def load_fields(path) -> FieldSet:
    with open(path, "rb") as fp:
        return read_fields(fp)
