"""Lightweight grouped-shuffle detector on a small numpy autodiff engine."""

from .model import ModelConfig, build_model, count_params, load_checkpoint, save_checkpoint
from .tensor import NumericError, ShapeError, Tape, Tensor

__all__ = [
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "build_model",
    "count_params",
    "load_checkpoint",
    "save_checkpoint",
]
