"""Minimal reverse-mode automatic differentiation over numpy arrays.

Supports exactly the operation set the fusion network needs (dense matmul,
elementwise nonlinearities, reductions, slicing, padding, pooling, concat).
It is not a general-purpose autograd: shapes are plain ndarrays, all data is
float64, and backward is only defined for scalar outputs.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from .errors import StateError

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    """Disable graph recording inside the context (used by eval-mode forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus an optional backward edge into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bw = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self._bw is not None})"

    def __getitem__(self, key) -> "Tensor":
        src_shape = self.data.shape
        out_data = self.data[key]

        def bw(g):
            full = np.zeros(src_shape)
            np.add.at(full, key, g)
            return (full,)

        return _make(out_data, (self,), bw)

    # operator sugar (scalars and ndarrays are wrapped as constants)
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src_shape),))

    def backward(self) -> None:
        """Backpropagate from a scalar output, accumulating into leaf ``grad``s."""
        if self.data.size != 1:
            raise StateError("backward is only defined for scalar outputs")
        if self._bw is None:
            raise StateError(
                "backward called without a recorded graph; run a train-mode forward first"
            )
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._bw is not None:
                for parent, pg in zip(node._parents, node._bw(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                node.grad = g if node.grad is None else node.grad + g


def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bw) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bw = bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data * b.data

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batched broadcasting over leading axes.

    The common (..., T, C) @ (C, D) case is routed through one flat GEMM,
    which is substantially faster than numpy's strided batch loop.
    """
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise StateError("matmul operands must have at least 2 dimensions")
    if b.ndim == 2 and a.ndim > 2:
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, a.data.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.data.shape[1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.data.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw)

    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def exp(x) -> Tensor:
    x = _t(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _t(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = _t(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x) -> Tensor:
    x = _t(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = _t(x)
    # split by sign so neither exp can overflow
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    out = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(out, (x,), bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw)


def swapaxes(x, ax1: int, ax2: int) -> Tensor:
    x = _t(x)
    return _make(np.swapaxes(x.data, ax1, ax2), (x,), lambda g: (np.swapaxes(g, ax1, ax2),))


def pad_axis(x, axis: int, left: int, right: int) -> Tensor:
    """Zero-pad one axis; backward slices the padding back off."""
    x = _t(x)
    pads = [(0, 0)] * x.ndim
    pads[axis] = (left, right)
    out = np.pad(x.data, pads)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(left, left + x.data.shape[axis])
    sl = tuple(sl)
    return _make(out, (x,), lambda g: (g[sl],))


def maxpool_time(x, window: int = 2) -> Tensor:
    """Max-pool over the time axis of a (batch, time, channels) tensor.

    Stride equals the window, so the time dimension shrinks by that factor.
    Requires the time dimension to be divisible by the window.
    """
    x = _t(x)
    b, t, c = x.data.shape
    if t % window != 0:
        raise StateError(f"time length {t} not divisible by pooling window {window}")
    blocks = x.data.reshape(b, t // window, window, c)
    arg = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[:, :, None, :], g[:, :, None, :], axis=2)
        return (gb.reshape(b, t, c),)

    return _make(out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (the shifted max is treated as a constant)."""
    x = _t(x)
    shift = x.data.max(axis=axis, keepdims=True)
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def stack_time(tensors: Iterable[Tensor]) -> Tensor:
    """Stack per-timestep (batch, channels) tensors into (batch, time, channels)."""
    cols = []
    for t in tensors:
        b, c = t.data.shape
        cols.append(t.reshape(b, 1, c))
    return concat(cols, axis=1)
