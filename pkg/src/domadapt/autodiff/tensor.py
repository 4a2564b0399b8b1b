"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records a vector-Jacobian product written in terms of other
primitives, so a backward pass run with ``create_graph=True`` is itself
differentiable (double backprop).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "Parameter",
    "Tape",
    "as_tensor",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "backward",
    "grad",
]


class NumericError(FloatingPointError):
    """Raised when a forward value or gradient stops being finite."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager disabling graph recording in the current thread."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


# (output_grad, needs) -> one gradient per parent; ``needs[i]`` is False when
# parent i's gradient is not wanted and may be returned as None.
VJP = Callable[["Tensor", tuple], Sequence["Tensor | None"]]


class Tensor:
    """Dense float64 array with an optional link into the recorded graph.

    Parameters
    ----------
    data : array_like
        Values, converted to a contiguous float64 array.
    requires_grad : bool
        Whether gradients should flow to this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: VJP | None = None
        self.op = "leaf"

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, create_graph: bool = False) -> None:
        backward(self, create_graph=create_graph)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops

        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    @property
    def T(self) -> Tensor:
        from . import ops

        return ops.transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """Trainable leaf tensor carrying per-parameter optimizer state."""

    __slots__ = ("name", "state")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.state: dict[str, np.ndarray] = {}

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, parents: tuple[Tensor, ...], vjp: VJP, op: str) -> Tensor:
    """Wrap a forward result, recording it on the graph when needed."""
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


class Tape:
    """Topologically ordered view of the graph reachable from a root.

    ``nodes[i]`` only depends on nodes with smaller index; the node id used in
    error messages is that index.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def index(self, node: Tensor) -> int:
        for i, n in enumerate(self.nodes):
            if n is node:
                return i
        raise KeyError(node)

    def run_backward(
        self, seed: Tensor, create_graph: bool, targets: Iterable[Tensor] | None = None
    ) -> dict[int, Tensor]:
        """Propagate ``seed`` from the last node; returns id(node) -> gradient.

        With ``targets`` only branches leading to those tensors are expanded.
        """
        if targets is None:
            needed = None
        else:
            needed = {id(t) for t in targets}
            for node in self.nodes:
                if any(id(p) in needed for p in node._parents):
                    needed.add(id(node))
        grads: dict[int, Tensor] = {id(self.nodes[-1]): seed}
        with _grad_mode(create_graph):
            for idx in range(len(self.nodes) - 1, -1, -1):
                node = self.nodes[idx]
                g = grads.get(id(node))
                if g is None or node._vjp is None:
                    continue
                if not np.isfinite(g.data).all():
                    raise NumericError(f"non-finite gradient at node {idx} ({node.op})")
                needs = tuple(
                    p.requires_grad and (needed is None or id(p) in needed) for p in node._parents
                )
                try:
                    parent_grads = node._vjp(g, needs)
                except NumericError as exc:
                    raise NumericError(f"non-finite gradient at node {idx} ({node.op}): {exc}") from exc
                for parent, need, pg in zip(node._parents, needs, parent_grads):
                    if pg is None or not need:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
        for idx, node in enumerate(self.nodes):
            g = grads.get(id(node))
            if g is not None and not np.isfinite(g.data).all():
                raise NumericError(f"non-finite gradient at node {idx} ({node.op})")
        return grads


def _check_scalar(root: Tensor) -> None:
    if root.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("output does not depend on any tensor requiring grad")


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    With ``create_graph=True`` the accumulated gradients keep their graph, so a
    second backward can differentiate through them.
    """
    _check_scalar(loss)
    tape = Tape.record(loss)
    grads = tape.run_backward(Tensor(np.ones_like(loss.data)), create_graph)
    for node in tape.nodes:
        if not node.is_leaf:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        if not create_graph:
            g = g.detach()
        if node.grad is None:
            node.grad = g
        elif create_graph:
            node.grad = node.grad + g
        else:
            node.grad = Tensor(node.grad.data + g.data)


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs unreachable from the output get a zero gradient.
    """
    inputs = list(inputs)
    if grad_output is None:
        _check_scalar(output)
        grad_output = Tensor(np.ones_like(output.data))
    elif not output.requires_grad:
        raise ValueError("output does not depend on any tensor requiring grad")
    grads = Tape.record(output).run_backward(grad_output, create_graph, targets=inputs)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        elif not create_graph:
            g = g.detach()
        result.append(g)
    return result
