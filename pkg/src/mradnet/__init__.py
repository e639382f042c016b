"""Radar range-azimuth object detection: model, data, training, evaluation."""

from .config import EvalConfig, ModelConfig, TrainConfig
from .geometry import RadarGrid
from .model import MRadNet, build_model, count_flops, count_params

__version__ = "0.1.0"

__all__ = [
    "EvalConfig",
    "ModelConfig",
    "TrainConfig",
    "RadarGrid",
    "MRadNet",
    "build_model",
    "count_flops",
    "count_params",
    "__version__",
]
