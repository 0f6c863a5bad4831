"""Minimal float64 autodiff engine used by the segmentation networks."""

from .tensor import EngineError, Tensor, backward, no_grad
from .ops import (
    BN_EPS, BatchNormState, ConvParams, add, batch_norm, bilinear_array,
    bilinear_resize, conv2d, cross_entropy_loss, mul, relu, scale,
    softmax_channels, sum_all,
)
from .optim import SGD, SgdState, sgd_step
from .gradcheck import grad_check

__all__ = [
    "EngineError", "Tensor", "backward", "no_grad",
    "ConvParams", "BatchNormState", "BN_EPS", "conv2d", "batch_norm", "relu",
    "add", "mul", "scale", "sum_all", "bilinear_resize", "bilinear_array",
    "softmax_channels", "cross_entropy_loss",
    "SGD", "SgdState", "sgd_step", "grad_check",
]
