"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them. ``backward`` walks the graph once in reverse topological order.
Broadcasting is limited to adding a row vector (bias) to a matrix and to
python scalars.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_ids = itertools.count()
_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: tuple["Tensor", ...] = (),
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if _op == "leaf":
            arr = np.array(arr, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if (requires_grad and _op == "leaf") else None
        self.id = next(_ids)
        self.op = _op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    live = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=live, _parents=tuple(parents) if live else (), _op=op)
    if live:
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    # interior buffers start empty; leaves keep whatever they accumulated
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- linear algebra -----------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ bd.T)
        if b.requires_grad:
            _acc(b, ad.T @ g)

    return _make(ad @ bd, (a, b), "matmul", bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, g.T)

    return _make(a.data.T, (a,), "transpose", bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ wd)
        if weight.requires_grad:
            _acc(weight, g.T @ xd)
        if bias is not None and bias.requires_grad:
            _acc(bias, g.sum(axis=0))

    return _make(out, parents, "linear", bw)


def outer(u: Tensor, v: Tensor) -> Tensor:
    """``u v^T`` for two vectors."""
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError(f"outer needs vectors, got {u.shape} and {v.shape}")
    ud, vd = u.data, v.data

    def bw(g):
        if u.requires_grad:
            _acc(u, g @ vd)
        if v.requires_grad:
            _acc(v, g.T @ ud)

    return _make(np.outer(ud, vd), (u, v), "outer", bw)


def trace(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace needs a square matrix, got {a.shape}")
    n = a.shape[0]

    def bw(g):
        _acc(a, g * np.eye(n))

    return _make(np.array(np.trace(a.data)), (a,), "trace", bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along the feature axis (the ⊕ of the model)."""
    tensors = [as_tensor(t) for t in tensors]
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    widths = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(widths)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            if t.requires_grad:
                _acc(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _acc(a, full)

    return _make(a.data[index], (a,), "take_rows", bw)


# -- elementwise arithmetic ---------------------------------------------
def _row_broadcast_ok(x: np.ndarray, y: np.ndarray) -> bool:
    if x.shape == y.shape or y.ndim == 0 or x.ndim == 0:
        return True
    return x.ndim == 2 and y.ndim == 1 and y.shape[0] == x.shape[1]


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.array(g.sum())
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not (_row_broadcast_ok(a.data, b.data) or _row_broadcast_ok(b.data, a.data)):
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _acc(b, _reduce_to(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not (_row_broadcast_ok(a.data, b.data) or _row_broadcast_ok(b.data, a.data)):
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, _reduce_to(g, a.shape))
        if b.requires_grad:
            _acc(b, -_reduce_to(g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, -g)

    return _make(-a.data, (a,), "neg", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, g * bd)
        if b.requires_grad:
            _acc(b, g * ad)

    return _make(ad * bd, (a, b), "mul", bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div shape mismatch: {a.shape} / {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        if a.requires_grad:
            _acc(a, g / bd)
        if b.requires_grad:
            _acc(b, -g * out / bd)

    return _make(out, (a, b), "div", bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _acc(a, g * c)

    return _make(a.data * c, (a,), "scale", bw)


def square(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        _acc(a, 2.0 * ad * g)

    return _make(ad * ad, (a,), "square", bw)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        _acc(a, g * 0.5 / out)

    return _make(out, (a,), "sqrt", bw)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        _acc(a, g / ad)

    return _make(np.log(ad), (a,), "log", bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _acc(a, g * out)

    return _make(out, (a,), "exp", bw)


# -- reductions ---------------------------------------------------------
def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), shape))

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), "sum", bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def sqnorm(a: Tensor) -> Tensor:
    """Sum of squared entries."""
    ad = a.data

    def bw(g):
        _acc(a, 2.0 * g * ad)

    return _make(np.array(np.dot(ad.ravel(), ad.ravel())), (a,), "sqnorm", bw)


def batch_standardize(x: Tensor) -> Tensor:
    """Subtract the per-column batch mean. Scaling to unit norm is left to callers."""
    if x.data.ndim != 2:
        raise ShapeError(f"batch_standardize needs a matrix, got {x.shape}")
    if x.shape[0] < 2:
        raise ShapeError(f"batch_standardize needs at least 2 rows, got {x.shape[0]}")
    out = x.data - x.data.mean(axis=0)

    def bw(g):
        _acc(x, g - g.mean(axis=0))

    return _make(out, (x,), "center", bw)


# -- nonlinearities -----------------------------------------------------
def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def bw(g):
        _acc(x, g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)))

    return _make(xd * cdf, (x,), "gelu", bw)


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x: Tensor) -> Tensor:
    xd = x.data

    def bw(g):
        _acc(x, g * _sigmoid(xd))

    return _make(_softplus(xd), (x,), "softplus", bw)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _acc(x, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _make(out, (x,), "softmax", bw)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def bw(g):
        _acc(x, g - np.exp(out) * g.sum(axis=1, keepdims=True))

    return _make(out, (x,), "log_softmax", bw)


def grad_reverse(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    if scale <= 0:
        raise ValueError(f"gradient reversal scale must be positive, got {scale}")
    factor = -float(scale)

    def bw(g):
        _acc(x, g * factor)

    return _make(x.data, (x,), "grad_reverse", bw)

