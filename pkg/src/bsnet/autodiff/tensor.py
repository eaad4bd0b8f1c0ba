"""Reverse-mode differentiable array.

A :class:`DiffArray` wraps a numpy array together with the closure that
propagates gradients to its parents.  Only leaves that were created with
``requires_grad=True`` keep a ``.grad``; gradients of intermediate nodes live
for the duration of a single :meth:`DiffArray.backward` call.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_mode = "float64"


def set_numeric_mode(mode: str) -> None:
    """Select the global floating point width ("float64" or "float32")."""
    global _mode
    if mode not in _DTYPES:
        raise ValueError(f"unknown numeric mode {mode!r}; expected one of {sorted(_DTYPES)}")
    _mode = mode


def get_numeric_mode() -> str:
    return _mode


def get_dtype() -> type:
    return _DTYPES[_mode]


@contextlib.contextmanager
def numeric_mode(mode: str) -> Iterator[None]:
    previous = get_numeric_mode()
    set_numeric_mode(mode)
    try:
        yield
    finally:
        set_numeric_mode(previous)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


ArrayLike = Union["DiffArray", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class DiffArray:
    """n-dimensional array with an attached backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[BackwardFn] = None, op: Optional[str] = None):
        if isinstance(data, DiffArray):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic properties ----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"DiffArray(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "DiffArray":
        return DiffArray(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ---------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: DiffArray) -> list:
    order, seen = [], set()
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_diff(x: ArrayLike) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def make_result(data: np.ndarray, parents: Sequence[DiffArray], backward: BackwardFn,
                op: str) -> DiffArray:
    """Wrap ``data`` as the output of ``op``; the graph is kept only if a parent needs it."""
    if any(p.requires_grad for p in parents):
        return DiffArray(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return DiffArray(data)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def power(a: ArrayLike, exponent: float) -> DiffArray:
    a = as_diff(a)
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_result(a.data ** exponent, (a,), backward, "pow")


def exp(a: ArrayLike) -> DiffArray:
    a = as_diff(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> DiffArray:
    a = as_diff(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: ArrayLike) -> DiffArray:
    a = as_diff(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: ArrayLike) -> DiffArray:
    a = as_diff(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def matmul(a: ArrayLike, b: ArrayLike) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


# -- reductions and shape manipulation ------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return make_result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return make_result(out, (a,), backward, "mean")


def reshape(a: ArrayLike, shape) -> DiffArray:
    a = as_diff(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: ArrayLike, axes=None) -> DiffArray:
    a = as_diff(a)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: ArrayLike, index) -> DiffArray:
    a = as_diff(a)

    advanced = _is_advanced_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), backward, "getitem")


def _is_advanced_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray, DiffArray)) for p in parts)


def concat(arrays: Sequence[ArrayLike], axis: int = 0) -> DiffArray:
    """Concatenate along ``axis``; every other extent must agree."""
    arrays = [as_diff(x) for x in arrays]
    if not arrays:
        raise ShapeError("concat needs at least one operand")
    ref = arrays[0].shape
    ax = axis % len(ref)
    for x in arrays:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat extent mismatch along non-concat axes: {[y.shape for y in arrays]}")
        if x.shape[ax] == 0:
            raise ShapeError(f"concat operand with empty axis {ax}: {x.shape}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrays])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(arrays)))

    return make_result(np.concatenate([x.data for x in arrays], axis=ax), arrays, backward, "concat")


def stack(arrays: Sequence[ArrayLike], axis: int = 0) -> DiffArray:
    arrays = [as_diff(x) for x in arrays]
    return concat([reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
                   for x in arrays], axis=axis)


def broadcast_to(a: ArrayLike, shape) -> DiffArray:
    a = as_diff(a)
    return make_result(np.broadcast_to(a.data, shape).copy(), (a,),
                       lambda g: (unbroadcast(g, a.shape),), "broadcast_to")
