"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure on the output
tensor. :func:`backward` walks the recorded graph in a deterministic
topological order (parents visited in argument order) and accumulates
gradients additively, so a tensor used twice receives the sum of both
contributions.

Only the operations the fusion model needs are provided. Broadcasting
follows numpy rules and gradients are summed back to the operand shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def default_dtype():
    return getattr(_state, "dtype", np.float64)


@contextmanager
def precision(dtype):
    """Build tensors in ``dtype`` inside the block.

    Only meant for graph-free evaluation, e.g. an extended-precision
    finite-difference oracle; training always runs in float64.
    """
    prev = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-d float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

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
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, op="param")
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return mul(x, float(c))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# --------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * y * (1.0 - y))

    return _result(y, (x,), backward, "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * y)

    return _result(y, (x,), backward, "exp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction along ``axis``."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    # summing in sorted order keeps the result exactly permutation-equivariant
    y = e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.sort(np.exp(z), axis=axis).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _result(y, (x,), backward, "log_softmax")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accumulate(x, g * inside)

    return _result(np.clip(x.data, lo, hi), (x,), backward, "clip")


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """L2-normalize along ``axis``."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward(g):
        _accumulate(x, (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _result(y, (x,), backward, "normalize")


# --------------------------------------------------------------------------
# reductions and layout


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(y, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    y = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _result(y, (x,), backward, "mean")


def max(x: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximizer."""
    x = as_tensor(x)
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        _accumulate(x, full)

    return _result(np.squeeze(y, axis=axis), (x,), backward, "max")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(y, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        shapes = ", ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        for x, piece in zip(xs, np.split(g, bounds, axis=axis)):
            _accumulate(x, piece)

    return _result(y, xs, backward, "concat")


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def take(x: Tensor, idx) -> Tensor:
    """Gather along the first axis."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _result(x.data[idx], (x,), backward, "take")


def scatter_add(x: Tensor, idx, n: int) -> Tensor:
    """Sum rows of ``x`` into an ``n``-row output at positions ``idx``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, idx, x.data)

    def backward(g):
        _accumulate(x, g[idx])

    return _result(out, (x,), backward, "scatter_add")


def take_along_last(x: Tensor, idx) -> Tensor:
    """Per-row gather on the last axis of a 2-d tensor; ``idx`` is (rows, k)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim == 1:
        idx = idx[:, None]
    if x.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"take_along_last: index {idx.shape} does not fit {x.shape}")
    rows = np.broadcast_to(np.arange(x.shape[0])[:, None], idx.shape)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, idx), g)
        _accumulate(x, full)

    return _result(x.data[rows, idx], (x,), backward, "take_along_last")


# --------------------------------------------------------------------------
# backprop


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays; call
    :func:`zero_grad` between optimization steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any trainable tensor")
    order = _topological(loss)
    # interior gradients are per-call scratch
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
