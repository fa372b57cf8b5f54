"""Differentiable dynamic-metasurface imager with noise-aware end-to-end training."""
from .em import AntennaOperator, DmaLayout, EmModel, SceneGrid, default_grid, default_layouts, random_layout
from .errors import MetaImagerError
from .noise import NoiseKind, NoiseSpec
from .pipeline import HybridModel, Mode, TrainConfig, evaluate, train

__all__ = [
    "AntennaOperator", "DmaLayout", "EmModel", "SceneGrid", "default_grid", "default_layouts",
    "random_layout", "MetaImagerError", "NoiseKind", "NoiseSpec", "HybridModel", "Mode",
    "TrainConfig", "evaluate", "train",
]
