"""Semantic-aware confidence propagation.

Every belief cell keeps one log-odds value per class. Each training step
reads per-measurement confidence weights from the current beliefs, then
folds the step's measurements into the cells they landed in::

    l_t = l_obs + l_{t-1} - l_0,   l_obs(k) = logit(clamp(N_k / N))

Weights are the floored log-odds normalized over classes, scaled by ``K``
so that a cell with no evidence yields a neutral weight of 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .grid import SceneBounds

PROB_EPS = 1e-3
LOGODDS_MAX = 10.0
L0 = 0.0


@dataclass
class ClassPrompts:
    embeddings: np.ndarray  # (K, D), unit rows
    labels: list[str]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise DomainError("prompt embeddings must be a K x D matrix")
        if len(self.labels) != len(self.embeddings):
            raise DomainError("one label per prompt embedding is required")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise DomainError("prompt embeddings must be unit length")

    @property
    def n_classes(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def classify_features(features: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    """Argmax-cosine class per row; rows with zero norm get ``-1``.

    ``np.argmax`` returns the first maximum, which gives the lowest-index tie rule.
    """
    f = np.asarray(features, dtype=np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    if f.shape[-1] != e.shape[1]:
        raise DomainError(f"feature dimension {f.shape[-1]} does not match prompts ({e.shape[1]})")
    norms = np.linalg.norm(f, axis=-1)
    en = e / np.linalg.norm(e, axis=1, keepdims=True)
    sims = f @ en.T
    ids = np.argmax(sims, axis=-1)
    return np.where(norms > 0, ids, -1)


def classify_measurement(feature, prompts: ClassPrompts) -> int | None:
    """Class of one 2D feature, or ``None`` for a zero vector."""
    cid = int(classify_features(np.asarray(feature)[None, :], prompts.embeddings)[0])
    return None if cid < 0 else cid


def observation_logodds(counts, eps: float = PROB_EPS) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum(axis=-1, keepdims=True)
    if np.any(n < 1):
        raise DomainError("observation_logodds needs at least one measurement")
    p = np.clip(counts / n, eps, 1.0 - eps)
    return np.log(p / (1.0 - p))


def update_cell(belief, obs, l_max: float = LOGODDS_MAX) -> np.ndarray:
    return np.clip(np.asarray(belief) + np.asarray(obs) - L0, -l_max, l_max)


def confidence_weights(belief) -> np.ndarray:
    """Floored log-odds normalized to a distribution; uniform when all are <= 0."""
    b = np.maximum(np.asarray(belief, dtype=np.float64), 0.0)
    k = b.shape[-1]
    s = b.sum(axis=-1, keepdims=True)
    out = np.divide(b, s, out=np.full_like(b, 1.0 / k), where=s > 0)
    return out


@dataclass
class MeasurementBatch:
    cell_ids: np.ndarray
    class_ids: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.cell_ids = np.asarray(self.cell_ids, dtype=np.int64).reshape(-1)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.cell_ids) != len(self.class_ids):
            raise DomainError("cell_ids and class_ids must have the same length")


class BeliefGrid:
    """Per-cell class log-odds over a regular partition of the scene box."""

    def __init__(self, bounds: SceneBounds, resolution, n_classes: int):
        self.bounds = bounds
        self.resolution = tuple(int(r) for r in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise DomainError("belief grid resolution must be positive on every axis")
        if n_classes < 1:
            raise DomainError("need at least one class")
        self.n_classes = int(n_classes)
        self.logodds = np.full((self.n_cells, self.n_classes), L0, dtype=np.float64)

    @property
    def n_cells(self) -> int:
        rx, ry, rz = self.resolution
        return rx * ry * rz

    @property
    def cell_size(self) -> np.ndarray:
        return self.bounds.extent / np.array(self.resolution)

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """Flat cell id per point; ``-1`` outside the box."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        res = np.array(self.resolution)
        ijk = np.floor((pts - self.bounds.min_corner) / self.cell_size).astype(np.int64)
        inside = self.bounds.contains(pts)
        ijk = np.clip(ijk, 0, res - 1)
        ids = (ijk[:, 0] * res[1] + ijk[:, 1]) * res[2] + ijk[:, 2]
        return np.where(inside, ids, -1)

    def cell_centers(self) -> np.ndarray:
        res = self.resolution
        axes = [
            self.bounds.min_corner[a] + (np.arange(res[a]) + 0.5) * self.cell_size[a] for a in range(3)
        ]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)

    def weigh_batch(self, batch: MeasurementBatch, update: bool = True) -> np.ndarray:
        """Confidence weight per measurement, then fold the batch into the beliefs.

        Weights are read from the state before this batch. Measurements with
        an unknown cell (negative or out of range) get weight 1 and are not
        folded in.
        """
        k = self.n_classes
        cells, classes = batch.cell_ids, batch.class_ids
        if np.any((classes < 0) | (classes >= k)):
            raise DomainError("class ids must lie in [0, K)")
        known = (cells >= 0) & (cells < self.n_cells)
        w = np.ones(len(cells))
        if np.any(known):
            conf = confidence_weights(self.logodds[cells[known]])
            w[known] = conf[np.arange(int(known.sum())), classes[known]] * k
        if update and np.any(known):
            uniq, inv = np.unique(cells[known], return_inverse=True)
            counts = np.bincount(inv * k + classes[known], minlength=len(uniq) * k).reshape(-1, k)
            obs = observation_logodds(counts)
            self.logodds[uniq] = update_cell(self.logodds[uniq], obs)
        return w

    def copy(self) -> "BeliefGrid":
        out = BeliefGrid(self.bounds, self.resolution, self.n_classes)
        out.logodds = self.logodds.copy()
        return out


def weigh_batch(grid: BeliefGrid, batch: MeasurementBatch) -> np.ndarray:
    return grid.weigh_batch(batch)
