"""Minimal reverse-mode autodiff with double-backprop support."""

from . import ops
from .nn import BatchNormState, batch_norm
from .ops import affine, leaky_relu, matmul, relu, softmax_cross_entropy
from .optim import Adam, adam_step, sgd_step, zero_grad
from .tensor import (
    NumericError,
    Parameter,
    Tape,
    Tensor,
    as_tensor,
    backward,
    enable_grad,
    grad,
    is_grad_enabled,
    no_grad,
)

__all__ = [
    "ops",
    "BatchNormState",
    "batch_norm",
    "affine",
    "leaky_relu",
    "matmul",
    "relu",
    "softmax_cross_entropy",
    "Adam",
    "adam_step",
    "sgd_step",
    "zero_grad",
    "NumericError",
    "Parameter",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "enable_grad",
    "grad",
    "is_grad_enabled",
    "no_grad",
]
