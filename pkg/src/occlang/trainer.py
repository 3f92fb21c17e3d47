"""Optimization loop: ray batching, rendering, confidence weighting, Adam steps.

Grid features are updated with a row-sparse ("lazy") Adam: only the vertices
that received a nonzero gradient in a step have their moments and values
touched. Decoder weights use ordinary dense Adam. Both groups share the
global step count for bias correction.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import FrameSet, backproject, camera_rays, sample_feature_map
from .errors import CheckpointError, DomainError
from .grid import FieldConfig, FieldGrads, FieldSet, SceneBounds, load_fields, read_fields, write_fields
from .objective import LossReport, LossWeights, evaluate
from .render import RayBundle, render, ray_termination_point, sample_bundle
from .scp import BeliefGrid, ClassPrompts, MeasurementBatch, classify_features

TERMS = ("rgb", "depth", "occ", "fs", "sg", "total")
STATE_MAGIC = b"OOS1"


@dataclass
class TrainConfig:
    iterations: int = 10000
    rays_per_batch: int = 6144
    samples_per_ray: int = 132
    lr_decoders: float = 1e-2
    lr_grids: float = 1e-3
    seed: int = 0
    scp_enabled: bool = True
    log_every: int = 100
    checkpoint_every: int = 1000
    # Adam moment coefficients and epsilon
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # skip color/semantic decoding where the compositing weight is at most this
    min_weight: float = 0.0
    # cells per axis of the belief grid; None follows the finest semantic level
    belief_resolution: tuple[int, int, int] | None = None
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)
        for name in ("rays_per_batch", "samples_per_ray", "log_every", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.iterations < 0:
            raise DomainError("iterations must be nonnegative")
        if self.lr_decoders <= 0 or self.lr_grids <= 0:
            raise DomainError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise DomainError("invalid Adam coefficients")
        if self.min_weight < 0:
            raise DomainError("min_weight must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["belief_resolution"] is not None:
            d["belief_resolution"] = list(d["belief_resolution"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("field"), dict):
            fc = dict(d["field"])
            if fc.get("hidden") is not None:
                fc["hidden"] = tuple(fc["hidden"])
            if fc.get("resolutions") is not None:
                fc["resolutions"] = tuple(tuple(r) for r in fc["resolutions"])
            d["field"] = FieldConfig(**fc)
        if d.get("belief_resolution") is not None:
            d["belief_resolution"] = tuple(d["belief_resolution"])
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over the arrays of a :class:`FieldSet`, lazy on grid rows."""

    def __init__(self, fields: FieldSet, config: TrainConfig):
        self.beta1, self.beta2, self.eps = config.beta1, config.beta2, config.adam_eps
        self.lr_grids, self.lr_decoders = config.lr_grids, config.lr_decoders
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in fields.parameters()}
        self.v = {name: np.zeros_like(p) for name, p in fields.parameters()}

    def _update(self, name, param, grad, lr, rows=None):
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        m, v = self.m[name], self.v[name]
        if rows is None:
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            param -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            return
        mr = b1 * m[rows] + (1.0 - b1) * grad
        vr = b2 * v[rows] + (1.0 - b2) * grad * grad
        m[rows], v[rows] = mr, vr
        param[rows] -= (lr / bc1) * mr / (np.sqrt(vr / bc2) + self.eps)

    def step(self, fields: FieldSet, grads: FieldGrads) -> None:
        self.t += 1
        for gname, grid, gg in zip(
            ("geometry", "color", "semantic"), fields.grids, (grads.geometry, grads.color, grads.semantic)
        ):
            for i, (lvl, sr) in enumerate(zip(grid.levels, gg)):
                if len(sr.rows) == 0:
                    continue
                keep = np.any(sr.values != 0, axis=1)
                if not np.any(keep):
                    continue
                vals = sr.values[keep].astype(lvl.features.dtype)
                self._update(f"{gname}.level{i}", lvl.features, vals, self.lr_grids, sr.rows[keep])
        for dname, dec, dg in zip(
            ("occ_decoder", "color_decoder", "sem_decoder"),
            fields.decoders,
            (grads.occ_decoder, grads.color_decoder, grads.sem_decoder),
        ):
            for i, ((w, b), (gw, gb)) in enumerate(zip(dec.layers, dg)):
                self._update(f"{dname}.w{i}", w, gw.astype(w.dtype), self.lr_decoders)
                self._update(f"{dname}.b{i}", b, gb.astype(b.dtype), self.lr_decoders)


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    fields: FieldSet
    beliefs: BeliefGrid | None
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    running: dict = field(default_factory=dict)
    prompts: ClassPrompts | None = None

    def log_record(self, report: LossReport) -> dict:
        return {"step": self.step, **report.terms()}


def scene_bounds(frames: FrameSet, margin: float = 0.1) -> SceneBounds:
    """Axis-aligned box around every back-projected depth point and camera."""
    pts = [fr.pose[:3, 3][None, :] for fr in frames.frames]
    for fr in frames.frames:
        p = backproject(fr, frames.intrinsics)
        if len(p):
            pts.append(p)
    allp = np.concatenate(pts)
    return SceneBounds(allp.min(axis=0) - margin, allp.max(axis=0) + margin)


def default_belief_resolution(fields: FieldSet) -> tuple[int, int, int]:
    res = fields.semantic.levels[-1].resolution
    return tuple(max(int(r) - 1, 1) for r in res)


def init_state(
    frames: FrameSet,
    config: TrainConfig,
    bounds: SceneBounds | None = None,
) -> TrainState:
    """Fresh fields, zero beliefs and a seeded generator."""
    if bounds is None:
        bounds = frames.bounds if frames.bounds is not None else scene_bounds(frames)
    rng = np.random.default_rng(config.seed)
    sem_dim = frames.feature_dim or (frames.prompts.dim if frames.prompts is not None else 1)
    fields = FieldSet.create(bounds, sem_dim, config.field, rng, dtype=np.float32)
    beliefs = None
    prompts = frames.prompts if frames.features_available else None
    if config.scp_enabled and prompts is not None:
        if prompts.dim != sem_dim:
            raise DomainError(f"prompt dimension {prompts.dim} does not match feature dimension {sem_dim}")
        res = config.belief_resolution or default_belief_resolution(fields)
        beliefs = BeliefGrid(bounds, res, prompts.n_classes)
    return TrainState(fields, beliefs, Adam(fields, config), rng, prompts=prompts)


# ---------------------------------------------------------------------------
# batches


def sample_batch(frames: FrameSet, config: TrainConfig, rng: np.random.Generator) -> RayBundle:
    """Uniform (frame, pixel) draws turned into world-space rays with targets."""
    if len(frames) == 0:
        raise DomainError("no frames to sample from")
    n = config.rays_per_batch
    h, w = frames.height, frames.width
    fid = rng.integers(0, len(frames), n)
    rows = rng.integers(0, h, n)
    cols = rng.integers(0, w, n)
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    feats = None
    if frames.features_available:
        feats = np.empty((n, frames.feature_dim))
    for f in np.unique(fid):
        sel = np.flatnonzero(fid == f)
        fr = frames.frames[f]
        r, c = rows[sel], cols[sel]
        o, d, scale = camera_rays(frames.intrinsics, fr.pose, r, c)
        origins[sel], dirs[sel] = o, d
        rgb[sel] = fr.rgb[r, c] / 255.0
        depth[sel] = fr.depth[r, c].astype(np.float64) * scale
        if feats is not None:
            feats[sel] = sample_feature_map(fr.features.array, r, c, h, w)
    if feats is not None:
        n = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = np.divide(feats, n, out=np.zeros_like(feats), where=n > 0)
    return RayBundle(origins, dirs, rgb, depth, feats, fid)


# ---------------------------------------------------------------------------
# steps


def _check_finite(report: LossReport) -> None:
    for name, val in report.terms().items():
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss term '{name}' ({val})")


def train_step(
    state: TrainState,
    batch: RayBundle,
    weights: LossWeights,
    config: TrainConfig,
) -> tuple[TrainState, LossReport]:
    """Render, weight, differentiate and take one Adam step; updates ``state`` in place."""
    bundle, samples = sample_bundle(
        batch, state.fields.bounds, config.samples_per_ray, weights.truncation, state.rng
    )
    with_sem = bundle.gt_feature is not None
    rp = render(
        state.fields, samples, bundle.directions,
        with_semantic=with_sem, min_weight=config.min_weight,
    )
    sg_w = None
    if with_sem and state.beliefs is not None and state.prompts is not None:
        classes = classify_features(bundle.gt_feature, state.prompts.embeddings)
        pts, ok = ray_termination_point(samples.depths, rp.weights, bundle.origins, bundle.directions)
        cells = np.where(ok, state.beliefs.cell_of(pts), -1)
        usable = classes >= 0
        sg_w = np.ones(len(bundle))
        # weights come from the pre-step beliefs; the fold-in happens in the same call
        sg_w[usable] = state.beliefs.weigh_batch(MeasurementBatch(cells[usable], classes[usable]))
    report, grads = evaluate(rp, bundle, weights, sg_w, need_grad=True)
    _check_finite(report)
    state.optimizer.step(state.fields, grads)
    state.step += 1
    for k, v in report.terms().items():
        prev = state.running.get(k)
        state.running[k] = v if prev is None else 0.95 * prev + 0.05 * v
    return state, report


def fit(
    frames: FrameSet,
    config: TrainConfig,
    weights: LossWeights | None = None,
    *,
    state: TrainState | None = None,
    bounds: SceneBounds | None = None,
    log: Callable[[dict], None] | None = None,
    checkpoint_dir=None,
) -> TrainState:
    """Run ``config.iterations`` steps (counting from the state's current step)."""
    weights = weights or LossWeights()
    state = state or init_state(frames, config, bounds)
    while state.step < config.iterations:
        batch = sample_batch(frames, config, state.rng)
        state, report = train_step(state, batch, weights, config)
        if log is not None and (state.step % config.log_every == 0 or state.step == 1):
            log(state.log_record(report))
        if checkpoint_dir is not None and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"step{state.step:06d}", config)
    return state


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is two files: ``<prefix>.ooc`` (fields) and ``<prefix>.state``
# (beliefs, optimizer moments, step, generator state, config). The state file is
# "OOS1", a uint32 header length, a UTF-8 JSON header, then the raw
# little-endian arrays listed in the header, back to back.


def _write_state(fp, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["arrays"] = [
        {"name": n, "dtype": np.dtype(a.dtype).newbyteorder("<").str, "shape": list(a.shape)}
        for n, a in arrays
    ]
    blob = json.dumps(header, sort_keys=True).encode()
    fp.write(STATE_MAGIC)
    fp.write(struct.pack("<I", len(blob)))
    fp.write(blob)
    for _, a in arrays:
        fp.write(np.ascontiguousarray(a, dtype=np.dtype(a.dtype).newbyteorder("<")).tobytes())


def _read_state(fp) -> tuple[dict, dict[str, np.ndarray]]:
    if fp.read(4) != STATE_MAGIC:
        raise CheckpointError("not a training state file (bad magic)")
    (n,) = struct.unpack("<I", fp.read(4))
    header = json.loads(fp.read(n).decode())
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        buf = fp.read(count * dt.itemsize)
        if len(buf) != count * dt.itemsize:
            raise CheckpointError(f"truncated training state at array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
    return header, arrays


def save_checkpoint(state: TrainState, prefix, config: TrainConfig | None = None) -> tuple[Path, Path]:
    """Write ``<prefix>.ooc`` and ``<prefix>.state``; returns both paths."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    f_path = prefix.with_name(prefix.name + ".ooc")
    s_path = prefix.with_name(prefix.name + ".state")
    buf = io.BytesIO()
    write_fields(buf, state.fields)
    f_path.write_bytes(buf.getvalue())
    arrays = []
    for name, _ in state.fields.parameters():
        arrays.append((f"adam.m.{name}", state.optimizer.m[name]))
        arrays.append((f"adam.v.{name}", state.optimizer.v[name]))
    header = {
        "step": state.step,
        "adam_t": state.optimizer.t,
        "rng": state.rng.bit_generator.state,
        "running": state.running,
        "config": config.to_dict() if config is not None else None,
        "beliefs": None,
        "prompts": None,
    }
    if state.beliefs is not None:
        b = state.beliefs
        header["beliefs"] = {"resolution": list(b.resolution), "n_classes": b.n_classes}
        arrays.append(("beliefs", b.logodds))
    if state.prompts is not None:
        header["prompts"] = state.prompts.labels
        arrays.append(("prompts", state.prompts.embeddings))
    buf = io.BytesIO()
    _write_state(buf, header, arrays)
    s_path.write_bytes(buf.getvalue())
    return f_path, s_path


def _prefix(path) -> Path:
    p = Path(path)
    if p.suffix in (".ooc", ".state"):
        return p.with_suffix("")
    return p


def load_checkpoint(path) -> tuple[TrainState, TrainConfig | None]:
    """Restore a :class:`TrainState` from a checkpoint prefix or either of its files."""
    prefix = _prefix(path)
    f_path = prefix.with_name(prefix.name + ".ooc")
    s_path = prefix.with_name(prefix.name + ".state")
    fields = load_fields(f_path)
    if not s_path.exists():
        raise CheckpointError(f"{s_path}: training state file not found")
    with open(s_path, "rb") as fp:
        header, arrays = _read_state(fp)
    config = TrainConfig.from_dict(header["config"]) if header.get("config") else None
    opt = Adam.__new__(Adam)
    c = config or TrainConfig()
    opt.beta1, opt.beta2, opt.eps = c.beta1, c.beta2, c.adam_eps
    opt.lr_grids, opt.lr_decoders = c.lr_grids, c.lr_decoders
    opt.t = int(header["adam_t"])
    opt.m, opt.v = {}, {}
    for name, p in fields.parameters():
        try:
            opt.m[name] = arrays[f"adam.m.{name}"].astype(p.dtype)
            opt.v[name] = arrays[f"adam.v.{name}"].astype(p.dtype)
        except KeyError as exc:
            raise CheckpointError(f"training state lacks optimizer moments for {name}") from exc
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    beliefs = None
    if header.get("beliefs"):
        bh = header["beliefs"]
        beliefs = BeliefGrid(fields.bounds, bh["resolution"], bh["n_classes"])
        beliefs.logodds = arrays["beliefs"].reshape(beliefs.logodds.shape)
    prompts = None
    if header.get("prompts") is not None:
        prompts = ClassPrompts(arrays["prompts"], list(header["prompts"]))
    state = TrainState(fields, beliefs, opt, rng, int(header["step"]), dict(header["running"]), prompts)
    return state, config


def read_checkpoint_fields(path) -> FieldSet:
    """Only the fields of a checkpoint (prefix, ``.ooc`` or ``.state`` path)."""
    prefix = _prefix(path)
    with open(prefix.with_name(prefix.name + ".ooc"), "rb") as fp:
        return read_fields(fp)
