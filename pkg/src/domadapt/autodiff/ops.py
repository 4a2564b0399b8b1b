"""Differentiable primitives.

Each vector-Jacobian product is expressed with these same primitives, which is
what makes second-order gradients work.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, Tensor, as_tensor, is_grad_enabled, make_result

__all__ = [
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "power",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "broadcast_to",
    "sum_to",
    "exp",
    "log",
    "sqrt",
    "relu",
    "leaky_relu",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "affine",
    "logsumexp",
    "softmax_cross_entropy",
    "clamp_min",
    "slice_rows",
    "pad_rows",
    "concat_rows",
    "batch_norm_train",
]


def _sum_to_shape(data: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if data.shape == shape:
        return data
    lead = data.ndim - len(shape)
    axes = list(range(lead))
    axes += [lead + i for i, s in enumerate(shape) if s == 1 and data.shape[lead + i] != 1]
    out = data.sum(axis=tuple(axes), keepdims=True)
    return out.reshape(shape)


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to a shape it was broadcast from."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return make_result(
        _sum_to_shape(x.data, shape), (x,), lambda g, needs: (broadcast_to(g, src),), "sum_to"
    )


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return make_result(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g, needs: (sum_to(g, src),), "broadcast_to"
    )


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), lambda g, needs: (sum_to(g, sa), sum_to(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), lambda g, needs: (sum_to(g, sa), sum_to(neg(g), sb)), "sub"
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            sum_to(mul(g, b), sa) if needs[0] else None,
            sum_to(mul(g, a), sb) if needs[1] else None,
        )

    return make_result(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        ga = sum_to(div(g, b), sa) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if needs[1] else None
        return ga, gb

    return make_result(a.data / b.data, (a, b), vjp, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if exponent == 1.0:
        return a

    def vjp(g, needs):
        if exponent == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, exponent - 1.0), exponent)),)

    return make_result(a.data**exponent, (a,), vjp, "pow")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return make_result(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    return make_result(a.data.T, (a,), lambda g, needs: (transpose(g),), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g, needs: (reshape(g, src),), "reshape")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return make_result(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = None

    def vjp(g, needs):
        return (mul(g, out),)

    out = make_result(data, (a,), vjp, "exp")
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return make_result(np.log(a.data), (a,), lambda g, needs: (div(g, a),), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out = None

    def vjp(g, needs):
        return (div(mul(g, 0.5), out),)

    out = make_result(np.sqrt(a.data), (a,), vjp, "sqrt")
    return out


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 taken from the positive branch
    mask = Tensor((a.data >= 0).astype(np.float64))
    return make_result(np.where(a.data >= 0, a.data, 0.0), (a,), lambda g, needs: (mul(g, mask),), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    pos = a.data >= 0
    scale = Tensor(np.where(pos, 1.0, slope))
    return make_result(
        np.where(pos, a.data, slope * a.data), (a,), lambda g, needs: (mul(g, scale),), "leaky_relu"
    )


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = None

    def vjp(g, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = make_result(_sigmoid_np(a.data), (a,), vjp, "sigmoid")
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return make_result(data, (a,), lambda g, needs: (mul(g, sigmoid(a)),), "softplus")


def log_sigmoid(a: Tensor) -> Tensor:
    return neg(softplus(neg(a)))


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"affine shape mismatch: input {x.shape}, weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out = add(out, bias)
    return out


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Row-wise log-sum-exp, stabilised by subtracting the (constant) max."""
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    shifted = sub(a, shift)
    return add(log(sum(exp(shifted), axis=axis, keepdims=True)), shift)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-d, got shape {logits.shape}")
    m, c = logits.shape
    if labels.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((m, c))
    onehot[np.arange(m), labels.astype(int)] = 1.0
    lse = logsumexp(logits, axis=1)
    picked = sum(mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    return mean(sub(lse, picked))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    mask = Tensor((a.data >= floor).astype(np.float64))
    return make_result(np.maximum(a.data, floor), (a,), lambda g, needs: (mul(g, mask),), "clamp_min")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    total = a.shape[0]
    return make_result(
        a.data[start:stop].copy(), (a,), lambda g, needs: (pad_rows(g, start, total),), "slice_rows"
    )


def pad_rows(a: Tensor, start: int, total: int) -> Tensor:
    """Embed ``a`` at row ``start`` of a zero array with ``total`` rows."""
    out = np.zeros((total,) + a.shape[1:])
    stop = start + a.shape[0]
    out[start:stop] = a.data
    return make_result(out, (a,), lambda g, needs: (slice_rows(g, start, stop),), "pad_rows")


def concat_rows(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g, needs):
        return tuple(slice_rows(g, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(np.concatenate([p.data for p in parts]), tuple(parts), vjp, "concat_rows")


def _bn_parts(x: Tensor, eps: float):
    mu = mean(x, axis=0, keepdims=True)
    centered = sub(x, mu)
    inv_std = div(1.0, sqrt(add(mean(mul(centered, centered), axis=0, keepdims=True), eps)))
    return mul(centered, inv_std), inv_std


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch-statistics normalisation fused into one graph node.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays.
    Plain backward passes use a closed-form numpy adjoint, graph-building ones
    compose the same adjoint from primitives so it stays differentiable.
    """
    xd = x.data
    mu = xd.mean(axis=0)
    centered = xd - mu
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def vjp(g, needs):
        if not is_grad_enabled():
            gd = g.data
            dxhat = gd * gamma.data
            dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
            return Tensor(dx), Tensor((gd * xhat).sum(axis=0)), Tensor(gd.sum(axis=0))
        xh, istd = _bn_parts(x, eps)
        dxhat = mul(g, gamma)
        dx = mul(
            istd,
            sub(
                sub(dxhat, mean(dxhat, axis=0, keepdims=True)),
                mul(xh, mean(mul(dxhat, xh), axis=0, keepdims=True)),
            ),
        )
        return dx, sum(mul(g, xh), axis=0), sum(g, axis=0)

    out = make_result(xhat * gamma.data + beta.data, (x, gamma, beta), vjp, "batch_norm")
    return out, mu, var
