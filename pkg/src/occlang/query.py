"""Geometry and open-vocabulary queries against a trained :class:`FieldSet`.

The fused map keeps a unit semantic feature on every lattice point whose
occupancy reaches the threshold; classes come from cosine argmax against
prompt embeddings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image
from skimage import measure

from .dataset import Intrinsics, camera_rays
from .errors import DatasetError, DomainError
from .grid import FieldSet, SceneBounds, occupancy, semantic
from .render import (
    TERMINATION_MIN_WEIGHT,
    RaySamples,
    ray_aabb,
    render,
    sample_depths,
)
from .scp import ClassPrompts, classify_features

log = logging.getLogger(__name__)

VOID = -1
VOID_PNG = 65535
CHUNK = 1 << 16


def _lattice_axes(bounds: SceneBounds, resolution) -> list[np.ndarray]:
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if np.any(res < 2):
        raise DomainError("lattice resolution must be at least 2 per axis")
    return [np.linspace(bounds.min_corner[a], bounds.max_corner[a], int(res[a])) for a in range(3)]


def _lattice_points(axes) -> np.ndarray:
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.reshape(-1) for a in g], axis=1)


def _chunked(fn, pts: np.ndarray, chunk: int = CHUNK) -> np.ndarray:
    if len(pts) == 0:
        return fn(pts)
    return np.concatenate([fn(pts[i : i + chunk]) for i in range(0, len(pts), chunk)])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


@dataclass
class OccFeatureMap:
    """Occupancy on a regular lattice plus unit features at occupied points."""

    resolution: tuple[int, int, int]
    bounds: SceneBounds
    occ: np.ndarray  # (rx, ry, rz) probabilities
    occupied: np.ndarray  # (rx, ry, rz) bool
    feat: np.ndarray  # (n_occupied, D), row order of np.nonzero(occupied)
    threshold: float = 0.5

    @property
    def points(self) -> np.ndarray:
        """World coordinates of the occupied lattice points, aligned with ``feat``."""
        axes = _lattice_axes(self.bounds, self.resolution)
        ii = np.nonzero(self.occupied)
        return np.stack([axes[a][ii[a]] for a in range(3)], axis=1)

    @property
    def n_occupied(self) -> int:
        return len(self.feat)


def build_occ_feature_map(
    fields: FieldSet,
    resolution,
    occ_threshold: float = 0.5,
    chunk: int = CHUNK,
) -> OccFeatureMap:
    """Evaluate occupancy on a lattice spanning the field bounds; decode features where occupied."""
    if not 0.0 < occ_threshold < 1.0:
        raise DomainError("occupancy threshold must lie in (0, 1)")
    bounds = fields.bounds
    axes = _lattice_axes(bounds, resolution)
    res = tuple(len(a) for a in axes)
    pts = _lattice_points(axes)
    occ = _chunked(lambda p: occupancy(fields, p), pts, chunk).reshape(res)
    occupied = occ >= occ_threshold
    sel = pts[occupied.reshape(-1)]
    feat = _chunked(lambda p: semantic(fields, p).astype(np.float64), sel, chunk)
    feat = _unit_rows(feat.reshape(len(sel), fields.sem_dim))
    return OccFeatureMap(res, bounds, occ, occupied, feat, occ_threshold)


def segment_3d(fmap: OccFeatureMap, prompts: ClassPrompts) -> np.ndarray:
    """Class id per occupied lattice point (``-1`` where the feature is zero)."""
    if fmap.feat.shape[1] != prompts.dim:
        raise DomainError(
            f"map features have dimension {fmap.feat.shape[1]} but prompts have {prompts.dim}"
        )
    return classify_features(fmap.feat, prompts.embeddings)


def query_similarity(fmap: OccFeatureMap, text_embedding) -> np.ndarray:
    """Cosine similarity of every occupied point's feature with one embedding."""
    e = np.asarray(text_embedding, dtype=np.float64).reshape(-1)
    if e.shape[0] != fmap.feat.shape[1]:
        raise DomainError(f"embedding has dimension {e.shape[0]} but map features have {fmap.feat.shape[1]}")
    if abs(np.linalg.norm(e) - 1.0) > 1e-4:
        raise DomainError("query embedding must be unit length")
    return np.clip(fmap.feat @ e, -1.0, 1.0)


# ---------------------------------------------------------------------------
# meshes


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) meters
    faces: np.ndarray  # (F, 3) vertex indices
    vertex_class: np.ndarray | None = None  # (V,) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise DomainError("mesh vertices must be finite")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DomainError("face index out of range")
        if self.vertex_class is not None:
            self.vertex_class = np.asarray(self.vertex_class, dtype=np.int64).reshape(-1)
            if len(self.vertex_class) != len(self.vertices):
                raise DomainError("one class id per vertex is required")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def euler_characteristic(self) -> int:
        """``V - E + F`` counted over referenced vertices and unique undirected edges."""
        if self.is_empty:
            return 0
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(e, axis=0))
        n_verts = len(np.unique(self.faces))
        return n_verts - n_edges + len(self.faces)

    def area(self) -> float:
        return float(face_areas(self).sum())


def face_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def extract_mesh(
    fields: FieldSet | Callable[[np.ndarray], np.ndarray],
    voxel_size: float = 0.01,
    threshold: float = 0.5,
    bounds: SceneBounds | None = None,
    chunk: int = CHUNK,
) -> Mesh:
    """Marching cubes on the occupancy sampled every ``voxel_size`` meters.

    ``fields`` may also be any callable mapping ``(P, 3)`` points to
    occupancy, in which case ``bounds`` is required. The lattice covers the
    bounds exactly; its spacing is at most ``voxel_size`` per axis. Normals
    point from occupied to free space.
    """
    if not 0.0 < threshold < 1.0:
        raise DomainError("threshold must lie in (0, 1)")
    if voxel_size <= 0:
        raise DomainError("voxel size must be positive")
    if isinstance(fields, FieldSet):
        bounds = bounds or fields.bounds
        occ_fn = lambda p: occupancy(fields, p)  # noqa: E731
    else:
        if bounds is None:
            raise DomainError("bounds are required with a callable occupancy")
        occ_fn = fields
    res = np.maximum(np.ceil(bounds.extent / voxel_size - 1e-9).astype(np.int64) + 1, 2)
    axes = _lattice_axes(bounds, res)
    spacing = tuple(float(a[1] - a[0]) for a in axes)
    vol = np.empty(tuple(int(r) for r in res), dtype=np.float32)
    # evaluate slab by slab to keep the point array small
    yz = _lattice_points([np.zeros(1), axes[1], axes[2]])
    for i, x in enumerate(axes[0]):
        pts = yz.copy()
        pts[:, 0] = x
        vol[i] = _chunked(occ_fn, pts, chunk).reshape(vol.shape[1:])
    if not (vol.min() < threshold < vol.max()):
        log.warning("occupancy never crosses %.3f; mesh is empty", threshold)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=threshold, spacing=spacing, gradient_direction="ascent"
    )
    return Mesh(verts.astype(np.float64) + bounds.min_corner, faces)


def label_mesh(mesh: Mesh, fields: FieldSet, prompts: ClassPrompts, chunk: int = CHUNK) -> Mesh:
    """Copy of ``mesh`` with the zero-shot class of every vertex attached."""
    if fields.sem_dim != prompts.dim:
        raise DomainError(f"field features have dimension {fields.sem_dim} but prompts have {prompts.dim}")
    pts = np.clip(mesh.vertices, fields.bounds.min_corner, fields.bounds.max_corner)
    feats = _chunked(lambda p: semantic(fields, p).astype(np.float64).reshape(len(p), -1), pts, chunk)
    return Mesh(mesh.vertices, mesh.faces, classify_features(feats, prompts.embeddings))


# ---------------------------------------------------------------------------
# 2D segmentation


def render_segmentation(
    fields: FieldSet,
    pose: np.ndarray,
    intrinsics: Intrinsics,
    prompts: ClassPrompts,
    height: int,
    width: int,
    n_samples: int = 132,
    chunk_rays: int = 2048,
) -> np.ndarray:
    """Per-pixel zero-shot labels for a camera; ``VOID`` where nothing is rendered.

    Samples sit at stratum midpoints, so the output is deterministic.
    """
    if fields.sem_dim != prompts.dim:
        raise DomainError(f"field features have dimension {fields.sem_dim} but prompts have {prompts.dim}")
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    o, d, _ = camera_rays(intrinsics, np.asarray(pose, dtype=np.float64), rr, cc)
    labels = np.full(height * width, VOID, dtype=np.int64)
    near, far, hit = ray_aabb(o, d, fields.bounds)
    hit &= far > near
    idx = np.flatnonzero(hit)
    for s in range(0, len(idx), chunk_rays):
        rows = idx[s : s + chunk_rays]
        z, valid = sample_depths(near[rows], far[rows], n_samples)
        pos = o[rows, None, :] + z[..., None] * d[rows, None, :]
        valid &= fields.bounds.contains(pos)
        rp = render(fields, RaySamples(pos, z, valid), with_color=False)
        ok = rp.sem_defined & (rp.weight_sum > TERMINATION_MIN_WEIGHT)
        cls = classify_features(rp.sem.astype(np.float64), prompts.embeddings)
        labels[rows] = np.where(ok, cls, VOID)
    return labels.reshape(height, width)


# ---------------------------------------------------------------------------
# file exports


def write_label_image(path, labels: np.ndarray) -> None:
    """16-bit single-channel PNG; ``VOID`` is stored as 65535."""
    lab = np.asarray(labels, dtype=np.int64)
    if np.any((lab != VOID) & ((lab < 0) | (lab >= VOID_PNG))):
        raise DomainError("labels must be VOID or lie in [0, 65535)")
    out = np.where(lab == VOID, VOID_PNG, lab).astype(np.uint16)
    Image.fromarray(out).save(path)


def read_label_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: label image must be single-channel")
    arr = arr.astype(np.int64)
    return np.where(arr == VOID_PNG, VOID, arr)


_PLY_TYPES = {"float": "<f4", "double": "<f8", "int": "<i4", "uchar": "u1", "uint": "<u4", "short": "<i2",
              "ushort": "<u2", "char": "i1", "float32": "<f4", "float64": "<f8", "int32": "<i4",
              "uint8": "u1", "uint32": "<u4", "int16": "<i2", "uint16": "<u2", "int8": "i1"}


def _ply_header(fmt: str, n_vert: int, vprops: list[tuple[str, str]], n_face: int | None) -> bytes:
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {n_vert}"]
    lines += [f"property {t} {n}" for n, t in vprops]
    if n_face is not None:
        lines += [f"element face {n_face}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _write_ply(path, columns: list[tuple[str, str, np.ndarray]], faces: np.ndarray | None, binary: bool):
    n = len(columns[0][2])
    fmt = "binary_little_endian" if binary else "ascii"
    head = _ply_header(fmt, n, [(name, t) for name, t, _ in columns], None if faces is None else len(faces))
    with open(path, "wb") as fp:
        fp.write(head)
        if binary:
            dt = np.dtype([(name, _PLY_TYPES[t]) for name, t, _ in columns])
            rec = np.empty(n, dtype=dt)
            for name, _, col in columns:
                rec[name] = col
            fp.write(rec.tobytes())
            if faces is not None:
                fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
                frec = np.empty(len(faces), dtype=fdt)
                frec["n"] = 3
                frec["i"] = faces
                fp.write(frec.tobytes())
        else:
            rows = []
            for i in range(n):
                parts = []
                for _, t, col in columns:
                    v = col[i]
                    parts.append(repr(float(v)) if t in ("float", "double") else str(int(v)))
                rows.append(" ".join(parts))
            if faces is not None:
                rows += [f"3 {a} {b} {c}" for a, b, c in faces]
            fp.write(("\n".join(rows) + ("\n" if rows else "")).encode("ascii"))


def write_mesh_ply(path, mesh: Mesh, binary: bool = True) -> None:
    """Triangle mesh as PLY; vertex class (if any) becomes an ``int`` property ``label``."""
    cols = [(a, "double", mesh.vertices[:, i]) for i, a in enumerate("xyz")]
    if mesh.vertex_class is not None:
        cols.append(("label", "int", mesh.vertex_class))
    _write_ply(path, cols, mesh.faces, binary)


def write_point_cloud_ply(
    path,
    points: np.ndarray,
    scalar: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    binary: bool = True,
) -> None:
    """Point cloud with an optional ``float`` property ``value`` and/or ``int`` ``label``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = [(a, "double", pts[:, i]) for i, a in enumerate("xyz")]
    if scalar is not None:
        cols.append(("value", "float", np.asarray(scalar, dtype=np.float32).reshape(-1)))
    if labels is not None:
        cols.append(("label", "int", np.asarray(labels, dtype=np.int64).reshape(-1)))
    _write_ply(path, cols, None, binary)


def read_ply(path) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Read the vertex properties and triangle faces of a PLY file.

    Supports ASCII and binary little-endian files with a ``vertex`` element
    and an optional triangle-only ``face`` element.
    """
    with open(path, "rb") as fp:
        if fp.readline().strip() != b"ply":
            raise DatasetError(f"{path}: not a PLY file")
        fmt = None
        elements: list[list] = []
        while True:
            line = fp.readline()
            if not line:
                raise DatasetError(f"{path}: unterminated PLY header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1][2].append((tok[4], "list", tok[2], tok[3]))
                else:
                    elements[-1][2].append((tok[2], tok[1]))
        if fmt not in ("ascii", "binary_little_endian"):
            raise DatasetError(f"{path}: unsupported PLY format {fmt}")
        body = fp.read()
    verts: dict[str, np.ndarray] = {}
    faces = None
    if fmt == "ascii":
        lines = body.decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            rows = [lines[pos + i].split() for i in range(count)]
            pos += count
            if name == "vertex":
                arr = np.array(rows, dtype=np.float64).reshape(count, len(props))
                for j, p in enumerate(props):
                    verts[p[0]] = arr[:, j]
            elif name == "face":
                faces = np.array([[int(v) for v in r[1:4]] for r in rows], dtype=np.int64).reshape(-1, 3)
    else:
        off = 0
        for name, count, props in elements:
            if name == "face":
                _, _, ct, it = props[0]
                fdt = np.dtype([("n", _PLY_TYPES[ct]), ("i", _PLY_TYPES[it], (3,))])
                rec = np.frombuffer(body, dtype=fdt, count=count, offset=off)
                if np.any(rec["n"] != 3):
                    raise DatasetError(f"{path}: only triangle faces are supported")
                faces = rec["i"].astype(np.int64)
                off += fdt.itemsize * count
            else:
                dt = np.dtype([(p[0], _PLY_TYPES[p[1]]) for p in props])
                rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
                off += dt.itemsize * count
                if name == "vertex":
                    verts = {p[0]: rec[p[0]].copy() for p in props}
    if not {"x", "y", "z"} <= verts.keys():
        raise DatasetError(f"{path}: PLY vertices lack x/y/z")
    return verts, faces


def read_mesh_ply(path) -> Mesh:
    verts, faces = read_ply(path)
    v = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    label = verts.get("label")
    return Mesh(v, np.zeros((0, 3), dtype=np.int64) if faces is None else faces, label)


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p

