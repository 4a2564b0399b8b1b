from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad.data


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; moments live in ``param.state``.

    Parameters without a gradient are skipped and their step counter is not
    advanced.
    """
    for p in params:
        if p.grad is None:
            continue
        g = p.grad.data
        st = p.state
        if not st:
            st["step"] = np.zeros(())
            st["m"] = np.zeros_like(p.data)
            st["v"] = np.zeros_like(p.data)
        st["step"] += 1
        t = float(st["step"])
        m, v = st["m"], st["v"]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        # bias corrections folded into the step size and epsilon
        corr2 = np.sqrt(1.0 - beta2**t)
        step_size = lr * corr2 / (1.0 - beta1**t)
        denom = np.sqrt(v)
        denom += eps * corr2
        p.data -= step_size * (m / denom)


class Adam:
    """Binds a parameter group to its Adam hyperparameters."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas[0], self.betas[1], self.eps)
