"""Hybrid convolution / selective-state-space segmentation on a small numpy autodiff core."""

from .model import ABLATIONS, ModelConfig, SegModel
from .tensor import DimensionError, NumericError, ParameterError, Tensor

__version__ = "0.1.0"

__all__ = ["ABLATIONS", "ModelConfig", "SegModel", "Tensor", "DimensionError", "NumericError", "ParameterError"]
