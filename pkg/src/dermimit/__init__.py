"""Multi-task vision transformer for skin disease diagnosis with lesion token selection
and cross-task feature fusion."""

from .config import ConfigurationError, ModelConfig, NumericFailure, RunConfig, TrainConfig, preset
from .model import DermImitFormer, LabelBatch, LossBreakdown, Prediction, infer, total_loss

__all__ = [
    "ConfigurationError",
    "DermImitFormer",
    "LabelBatch",
    "LossBreakdown",
    "ModelConfig",
    "NumericFailure",
    "Prediction",
    "RunConfig",
    "TrainConfig",
    "infer",
    "preset",
    "total_loss",
]
__version__ = "0.1.0"
