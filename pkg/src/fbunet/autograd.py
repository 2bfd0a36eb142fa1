"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Feature maps are 4-D ``(batch, channels, rows, cols)`` arrays. Every
differentiable op in :mod:`fbunet.ops` returns a :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent. :func:`backward` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import enum

import numpy as np

from .errors import ContractError


class Precision(enum.Enum):
    """Floating-point mode for a whole graph."""

    STANDARD = "standard"
    EXTENDED = "extended"

    @property
    def dtype(self):
        return np.float32 if self is Precision.STANDARD else np.float64

    @classmethod
    def of(cls, value) -> "Precision":
        if isinstance(value, Precision):
            return value
        if value in ("standard", "extended"):
            return cls(value)
        return cls.EXTENDED if np.dtype(value) == np.float64 else cls.STANDARD


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (inference, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A real array that can take part in a gradient graph.

    Args:
        data: array-like values. Non-floating input is cast to float32.
        requires_grad: whether :func:`backward` should populate ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _not_scalar(t):
    raise ContractError(f"tensor of shape {t.shape} is not scalar")


class Parameter(Tensor):
    """A learnable tensor carrying its own Adam moment buffers."""

    __slots__ = ("m", "v", "step_count")

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0


def make_node(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, attaching graph information when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every gradient-requiring leaf reachable from ``loss``.

    ``loss`` must have shape ``(1, 1, 1, 1)``. Leaf gradients accumulate, so a
    leaf reached along several paths (e.g. a convolution weight shared by two
    feedback rounds) receives the sum of the path gradients.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a (1,1,1,1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
