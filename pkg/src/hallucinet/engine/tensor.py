"""Dense tensors with reverse-mode automatic differentiation.

Standard precision is float32; float64 exists for finite-difference
gradient oracles. Every op verifies its output is finite and raises
NonFiniteError otherwise.
"""
from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """An engine operation produced NaN or infinity."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A node of the computation graph: value, op tag, parents, gradient."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str = "leaf", parents: tuple = ()):
        self.data = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same value, cut off from the graph (stop-gradient)."""
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self):
        self.grad = None

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an engine op")
        return mul(self, 1.0 / float(other))


class Parameter(Tensor):
    """A named, optionally trainable leaf tensor of a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, op="parameter")
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), op="const")


def check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def make_node(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    """Assemble an op's output node; graph edges only where grads are needed."""
    check_finite(data, op)
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, op=op)
    if requires:
        out.parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: Tensor, grad: np.ndarray):
    grad = _unbroadcast(np.asarray(grad, dtype=tensor.dtype), tensor.data.shape)
    # accumulation is out-of-place, so sharing the upstream buffer is safe
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


# -- elementwise ops -----------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad)
        if b.requires_grad:
            _accumulate(b, out.grad)

    return make_node(a.data + b.data, "add", (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad * b.data)
        if b.requires_grad:
            _accumulate(b, out.grad * a.data)

    return make_node(a.data * b.data, "mul", (a, b), backward)


def log(a: Tensor) -> Tensor:
    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad / a.data)

    return make_node(np.log(a.data), "log", (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    mask = a.data > floor

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad * mask)

    return make_node(np.maximum(a.data, floor), "clamp_min", (a,), backward)


def tsum(a: Tensor) -> Tensor:
    def backward(out):
        if a.requires_grad:
            _accumulate(a, np.full(a.data.shape, out.grad, dtype=a.dtype))

    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(out):
        if a.requires_grad:
            _accumulate(a, np.full(a.data.shape, out.grad / n, dtype=a.dtype))

    return make_node(np.asarray(a.data.mean(), dtype=a.dtype), "mean", (a,), backward)


# -- backward pass -------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological node order, deterministic (parent creation order)."""
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
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor):
    """Populate .grad for every tensor reachable from a scalar root.

    Each node's backward hook runs exactly once, in reverse topological
    order, so repeated runs on the same values give bit-identical grads.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise ValueError("backward root does not require grad")
    order = topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
