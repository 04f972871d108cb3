"""Prototype-guided voxel occupancy refinement and training-free anomaly scoring."""

from .echoood import ScoreMap, score_scene
from .metrics import MetricReport, evaluate
from .prototype_bank import PrototypeBank, ema_update, usable_classes
from .voxel_core import EMPTY, IGNORE, ClassCatalog, GridDims

__version__ = "0.1.0"

__all__ = [
    "EMPTY", "IGNORE", "ClassCatalog", "GridDims", "MetricReport", "PrototypeBank", "ScoreMap",
    "ema_update", "evaluate", "score_scene", "usable_classes",
]
