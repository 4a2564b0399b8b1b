"""Layer-level functions built from the primitives."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, width: int):
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalise columns of ``x``; batch statistics in training, running ones otherwise.

    Training mode updates ``state`` in place with the unbiased batch variance.
    """
    if training:
        m = x.shape[0]
        if m < 2:
            raise ValueError(f"batch norm in train mode needs at least 2 rows, got {m}")
        out, mu, var = ops.batch_norm_train(x, gamma, beta, eps)
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mu
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * var * m / (m - 1)
        return out
    xhat = ops.div(ops.sub(x, Tensor(state.running_mean)), Tensor(np.sqrt(state.running_var + eps)))
    return ops.add(ops.mul(xhat, gamma), beta)
