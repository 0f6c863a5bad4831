"""Dense float64 tensors and the reverse-mode differentiation core."""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = ["EngineError", "Tensor", "no_grad", "backward"]


class EngineError(ValueError):
    """Inconsistent shapes, invalid arguments, or non-finite values."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


class no_grad:
    """Context manager that suspends graph construction (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _local.enabled = False
        return self

    def __exit__(self, *exc):
        _local.enabled = self._prev
        return False


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise EngineError("non-finite value in tensor data")
    return arr


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients
    in ``.grad`` across calls to :func:`backward`.  Operation results carry
    the graph edges needed to reach their leaves; their transient gradients
    are not retained.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise EngineError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _op_result(data: np.ndarray, parents: Sequence[Tensor],
               backward_fn: Callable) -> Tensor:
    """Wrap an op output, attaching graph edges when gradients are live.

    ``backward_fn(grad)`` must return one gradient array (or None) per
    parent, aligned positionally.
    """
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Repeated calls keep accumulating; callers reset leaf grads themselves.
    """
    if loss.data.ndim != 0:
        raise EngineError("backward() expects a scalar loss")

    # Iterative depth-first topological order; graphs can be a few hundred
    # nodes deep and must not hit the interpreter recursion limit.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    flows: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        grad = flows.pop(id(node), None)
        if grad is None:
            continue
        if node._backward_fn is None:
            # Leaf: park the flow for the final accumulation below.
            flows[id(node)] = grad
            continue
        for parent, pg in zip(node._parents, node._backward_fn(grad)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flows.get(id(parent))
            flows[id(parent)] = pg if acc is None else acc + pg

    for node in topo:
        if node.requires_grad and node._backward_fn is None:
            grad = flows.get(id(node))
            if grad is None:
                continue
            grad = np.broadcast_to(grad, node.data.shape).astype(np.float64)
            node.grad = grad.copy() if node.grad is None else node.grad + grad
