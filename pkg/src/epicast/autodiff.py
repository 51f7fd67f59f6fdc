"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 ndarray and records the operation that produced
it.  ``Tensor.backward()`` walks the recorded graph once in reverse
topological order and accumulates ``grad`` arrays on every tensor built with
``requires_grad=True``.  Results of operations whose inputs carry no gradient
requirement are plain constants (no tape entry), so mixing learnable tensors
with large constant data stays cheap.

Broadcasting follows numpy semantics; gradients flowing back through a
broadcast are summed down to the original operand shape.

The module-level helpers (``exp``, ``sigmoid``, ``softmax``, ``mean``, ...)
are polymorphic: given a Tensor they build tape nodes, given an ndarray they
fall through to numpy.  Model code written against these helpers runs both in
training (differentiable) and as plain array math.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "absolute",
    "as_data",
    "exp",
    "log",
    "matmul",
    "mean",
    "minimum",
    "pad_axis",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "summation",
    "swapaxes",
    "tanh",
    "transpose",
]


def _asarray(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after a numpy-style broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, size in enumerate(shape) if size == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    # Keep numpy from consuming us in mixed expressions; python then falls
    # back to our reflected dunders.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # ------------------------------------------------------------------ basics

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}{flag})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy() if grad.base is not None else grad
        else:
            self.grad = self.grad + grad

    # ------------------------------------------------------------ graph engine

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor (seed defaults to ones)."""
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = _asarray(seed)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"seed shape {seed.shape} does not match tensor shape {self.data.shape}"
                )
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other):
        other = _lift(other)
        out_data = self.data + other.data
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(g, b.data.shape))

        return _from_op(out_data, (a, b), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        out_data = self.data - other.data
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(-g, b.data.shape))

        return _from_op(out_data, (a, b), backward)

    def __rsub__(self, other):
        return _lift(other).__sub__(self)

    def __mul__(self, other):
        other = _lift(other)
        out_data = self.data * other.data
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(g * a.data, b.data.shape))

        return _from_op(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        out_data = self.data / other.data
        a, b = self, other

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return _from_op(out_data, (a, b), backward)

    def __rtruediv__(self, other):
        return _lift(other).__truediv__(self)

    def __neg__(self):
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(-g)

        return _from_op(-a.data, (a,), backward)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        a = self
        out_data = a.data ** exponent

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g * exponent * a.data ** (exponent - 1))

        return _from_op(out_data, (a,), backward)

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul requires operands with at least 2 dimensions")
        out_data = a.data @ b.data

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                a._accumulate(unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accumulate(unbroadcast(gb, b.data.shape))

        return _from_op(out_data, (a, b), backward)

    def __rmatmul__(self, other):
        return _lift(other).__matmul__(self)

    # ----------------------------------------------------------- shape changes

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g.reshape(a.data.shape))

        return _from_op(out_data, (a,), backward)

    def transpose(self, axes: Sequence[int]):
        a = self
        axes = tuple(axes)
        inverse = tuple(int(i) for i in np.argsort(axes))
        out_data = a.data.transpose(axes)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g.transpose(inverse))

        return _from_op(out_data, (a,), backward)

    def swapaxes(self, axis1: int, axis2: int):
        a = self
        out_data = np.swapaxes(a.data, axis1, axis2)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(np.swapaxes(g, axis1, axis2))

        return _from_op(out_data, (a,), backward)

    def __getitem__(self, index):
        a = self
        out_data = a.data[index]

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                buffer = np.zeros_like(a.data)
                buffer[index] += g
                a._accumulate(buffer)

        return _from_op(out_data, (a,), backward)

    # -------------------------------------------------------------- reductions

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g: np.ndarray) -> None:
            if not a.requires_grad:
                return
            grad = g
            if not keepdims and axis is not None:
                grad = np.expand_dims(grad, axis)
            a._accumulate(np.broadcast_to(grad, a.data.shape).copy())

        return _from_op(out_data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    count = 1
    for ax in axis:
        count *= shape[ax]
    return count


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _from_op(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Public hook for fused custom operations (see the kernel modules)."""
    return _from_op(_asarray(data), tuple(parents), backward)


def as_data(value) -> np.ndarray:
    """The raw ndarray behind either a Tensor or an array-like."""
    return value.data if isinstance(value, Tensor) else _asarray(value)


# ------------------------------------------------------------------ elementwise


def _unary(value, fn_np, make_grad):
    if isinstance(value, Tensor):
        a = value
        out_data = fn_np(a.data)
        grad_fn = make_grad(a.data, out_data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g * grad_fn())

        return _from_op(out_data, (a,), backward)
    return fn_np(_asarray(value))


def exp(value):
    return _unary(value, np.exp, lambda x, out: lambda: out)


def log(value):
    return _unary(value, np.log, lambda x, out: lambda: 1.0 / x)


def tanh(value):
    return _unary(value, np.tanh, lambda x, out: lambda: 1.0 - out * out)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    grown = np.exp(x[~positive])
    out[~positive] = grown / (1.0 + grown)
    return out


def sigmoid(value):
    return _unary(value, _sigmoid_np, lambda x, out: lambda: out * (1.0 - out))


def relu(value):
    return _unary(
        value,
        lambda x: np.maximum(x, 0.0),
        lambda x, out: lambda: (out > 0.0).astype(np.float64),
    )


def absolute(value):
    return _unary(value, np.abs, lambda x, out: lambda: np.sign(x))


def minimum(first, second):
    """Elementwise minimum; ties route the gradient to ``first``."""
    if isinstance(first, Tensor) or isinstance(second, Tensor):
        a, b = _lift(first), _lift(second)
        out_data = np.minimum(a.data, b.data)
        mask = a.data <= b.data

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(unbroadcast(g * mask, a.data.shape))
            if b.requires_grad:
                b._accumulate(unbroadcast(g * ~mask, b.data.shape))

        return _from_op(out_data, (a, b), backward)
    return np.minimum(_asarray(first), _asarray(second))


# ----------------------------------------------------------------- reductions


def summation(value, axis=None, keepdims: bool = False):
    if isinstance(value, Tensor):
        return value.sum(axis=axis, keepdims=keepdims)
    return _asarray(value).sum(axis=axis, keepdims=keepdims)


def mean(value, axis=None, keepdims: bool = False):
    if isinstance(value, Tensor):
        return value.mean(axis=axis, keepdims=keepdims)
    return _asarray(value).mean(axis=axis, keepdims=keepdims)


def softmax(value, axis: int = -1):
    """Row-stochastic softmax along ``axis`` (max-shifted for stability)."""
    if isinstance(value, Tensor):
        shifted = value - np.max(value.data, axis=axis, keepdims=True)
        grown = exp(shifted)
        return grown / grown.sum(axis=axis, keepdims=True)
    raw = _asarray(value)
    shifted = raw - raw.max(axis=axis, keepdims=True)
    grown = np.exp(shifted)
    return grown / grown.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------- shape helpers


def reshape(value, shape):
    if isinstance(value, Tensor):
        return value.reshape(shape)
    return _asarray(value).reshape(shape)


def transpose(value, axes: Sequence[int]):
    if isinstance(value, Tensor):
        return value.transpose(axes)
    return _asarray(value).transpose(tuple(axes))


def swapaxes(value, axis1: int, axis2: int):
    if isinstance(value, Tensor):
        return value.swapaxes(axis1, axis2)
    return np.swapaxes(_asarray(value), axis1, axis2)


def matmul(first, second):
    if isinstance(first, Tensor) or isinstance(second, Tensor):
        return _lift(first) @ _lift(second)
    return _asarray(first) @ _asarray(second)


def pad_axis(value, axis: int, before: int, after: int = 0):
    """Zero-pad one axis (used for causal left-padding of the time axis)."""
    if isinstance(value, Tensor):
        a = value
        widths = [(0, 0)] * a.data.ndim
        widths[axis] = (before, after)
        out_data = np.pad(a.data, widths)
        slicer = [slice(None)] * a.data.ndim
        slicer[axis] = slice(before, before + a.data.shape[axis])
        slicer = tuple(slicer)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accumulate(g[slicer])

        return _from_op(out_data, (a,), backward)
    raw = _asarray(value)
    widths = [(0, 0)] * raw.ndim
    widths[axis] = (before, after)
    return np.pad(raw, widths)
