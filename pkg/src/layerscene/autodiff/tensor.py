"""Dense tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure computing vector-Jacobian products. ``Tensor.backward`` walks the
recorded graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class DomainError(ValueError):
    """An operation was evaluated outside its domain (e.g. log of 0)."""


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (``float32``/``float64``)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording the graph."""
    old = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype.kind == "f":
        return arr
    return arr.astype(get_default_dtype())


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor upstream.

        Gradients accumulate across calls; call ``zero_grad`` on leaves (or use
        an optimizer's ``zero_grad``) between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (loss must be scalar)", self.shape)
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


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
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a, dtype=dtype) if dtype is not None else a)


def make_op(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap a forward result, recording the graph edge when gradients are on."""
    out = Tensor(data)
    parents = tuple(parents)
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise
def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = a.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return make_op(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,))


def elu(a: Tensor) -> Tensor:
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg_part)
    return make_op(out, (a,), lambda g: (g * np.where(x > 0, 1, neg_part + 1).astype(x.dtype),))


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * s,))


def xlogx(a: Tensor) -> Tensor:
    """Elementwise ``x * log(x)`` with ``0 log 0 = 0``; gradient ``log x + 1`` (0 at x=0)."""
    x = a.data
    pos = x > 0
    safe = np.where(pos, x, 1)
    out = np.where(pos, x * np.log(safe), 0).astype(x.dtype)
    return make_op(out, (a,), lambda g: (g * np.where(pos, np.log(safe) + 1, 0).astype(x.dtype),))


# ------------------------------------------------------------------ linalg
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -------------------------------------------------------------- reductions
def _norm_axes(axis, ndim) -> tuple | None:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range", (ndim,))
        out.append(ax % ndim)
    return tuple(out)


def _expand(g: np.ndarray, shape: tuple, axes, keepdims: bool) -> np.ndarray:
    if axes is not None and not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    return make_op(np.asarray(out), (a,), lambda g: (_expand(g, a.shape, axes, keepdims).copy(),))


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = np.mean(a.data, axis=axes, keepdims=keepdims)
    return make_op(np.asarray(out), (a,),
                   lambda g: (_expand(g / count, a.shape, axes, keepdims).copy(),))


def tmax(a: Tensor, axis: int | None = None, keepdims=False) -> Tensor:
    """Maximum; the gradient goes to the first maximal element only."""
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]

        def backward(g):
            gx = np.zeros(a.size, dtype=a.dtype)
            gx[idx] = g.reshape(())
            return (gx.reshape(a.shape),)

        out = np.asarray(out).reshape((1,) * a.ndim if keepdims else ())
        return make_op(out, (a,), backward)
    (ax,) = _norm_axes(axis, a.ndim)
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)

    def backward(g):
        gx = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gk, axis=ax)
        return (gx,)

    return make_op(out if keepdims else np.squeeze(out, ax), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return make_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)
    return make_op(out, (a,), lambda g: (g - prob * g.sum(axis=ax, keepdims=True),))


# ------------------------------------------------------------ shape moving
def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape to {tuple(shape)}", a.shape) from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_op(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        gx = np.zeros_like(a.data)
        if _is_fancy(idx):
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)

    return make_op(np.array(out, copy=True), (a,), backward)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in tensors]) from None
    n = len(tensors)
    return make_op(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad2d(a: Tensor, pad: int | tuple) -> Tensor:
    """Zero-pad the last two axes by ``pad`` (int or (top, bottom, left, right))."""
    if isinstance(pad, int):
        pad = (pad, pad, pad, pad)
    t, b, l, r = pad
    widths = [(0, 0)] * (a.ndim - 2) + [(t, b), (l, r)]
    out = np.pad(a.data, widths)
    H, W = a.shape[-2:]
    return make_op(out, (a,), lambda g: (g[..., t:t + H, l:l + W],))


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return make_op(out.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))
