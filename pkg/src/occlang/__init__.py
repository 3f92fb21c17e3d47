"""Occupancy fields with distilled language features from posed RGB-D frames.

The package fits three multi-resolution feature grids (geometry, color,
semantics) with small decoders to RGB-D frames and per-pixel embedding maps,
then answers open-vocabulary queries by cosine matching against text
embeddings.
"""

__version__ = "0.1.0"

from .errors import CheckpointError, DatasetError, DomainError
from .grid import FieldConfig, FieldSet, MultiResGrid, SceneBounds, color, occupancy, semantic
from .objective import LossWeights
from .scp import BeliefGrid, ClassPrompts
from .dataset import FrameSet, load_frameset, save_frameset
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint
from .query import build_occ_feature_map, extract_mesh, segment_3d

__all__ = [
    "BeliefGrid", "CheckpointError", "ClassPrompts", "DatasetError", "DomainError",
    "FieldConfig", "FieldSet", "FrameSet", "LossWeights", "MultiResGrid", "SceneBounds",
    "TrainConfig", "build_occ_feature_map", "color", "extract_mesh", "fit", "load_checkpoint",
    "load_frameset", "occupancy", "save_checkpoint", "save_frameset", "segment_3d", "semantic",
]
