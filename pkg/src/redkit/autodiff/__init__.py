"""Small reverse-mode autodiff engine: the layers the detector network needs, plus Adam."""

from redkit.autodiff.functional import (
    activation, batchnorm1d, conv1d, conv1d_transpose, crop_or_pad, dense, flatten,
    maxpool1d, mse_loss, relu, reshape, sigmoid, softmax_cross_entropy,
)
from redkit.autodiff.optim import Adam, AdamState, adam_step
from redkit.autodiff.tensor import Tensor, parameter

__all__ = [
    "Adam", "AdamState", "Tensor", "activation", "adam_step", "batchnorm1d", "conv1d",
    "conv1d_transpose", "crop_or_pad", "dense", "flatten", "maxpool1d", "mse_loss",
    "parameter", "relu", "reshape", "sigmoid", "softmax_cross_entropy",
]
