"""A small reverse-mode automatic differentiation engine over NumPy arrays.

Only the operations the U-Net and its losses need are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients; :meth:`Tensor.backward`
walks the graph in reverse topological order and then frees it.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from munet import kernels


class GraphError(RuntimeError):
    """Raised when backward is requested on a graph that was already freed."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self._freed:
            raise GraphError("backward called twice on the same graph")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True

    # arithmetic sugar
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

    def __neg__(self):
        return mul(self, -1.0)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
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
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if _needs_grad(a) else None
        gb = _unbroadcast(g * a.data, b.shape) if _needs_grad(b) else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return _make(np.abs(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        return (g * (x.data > 0),)

    return _make(np.maximum(x.data, 0), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    def backward(g):
        return (np.where(x.data > 0, g, g * slope),)

    return _make(np.where(x.data > 0, x.data, x.data * x.data.dtype.type(slope)), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)

    def backward(g):
        return (g * y * (1 - y),)

    return _make(y, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero each entry with probability ``rate``, rescale the rest."""
    if rate <= 0:
        return x
    keep = (rng.random(x.shape, dtype=np.float64) >= rate).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - rate))
    return mul(x, keep)


# ---------------------------------------------------------------- reductions

def sum_(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    s = sum_(x, axis)
    return mul(s, x.dtype.type(1.0 / n))


def l1_mean(x: Tensor, axis=None) -> Tensor:
    """Mean absolute value (the L1 reduction used by both loss kinds)."""
    return mean(absolute(x), axis)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation; ``w`` has shape (C_out, C_in, kh, kw)."""
    B, C, H, W = x.shape
    cout, cin, kh, kw = w.shape
    if cin != C:
        raise ValueError(f"conv2d expects {cin} input channels, got {C}")
    oh = kernels.conv_out_size(H, kh, stride, pad)
    ow = kernels.conv_out_size(W, kw, stride, pad)
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(cout, -1)
    y = np.matmul(w2, cols)
    if b is not None:
        y += b.data[None, :, None]
    y = y.reshape(B, cout, oh, ow)

    def backward(g):
        g2 = g.reshape(B, cout, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape) if _needs_grad(w) else None
        gx = None
        if _needs_grad(x):
            gx = kernels.col2im(np.matmul(w2.T, g2), x.shape, kh, kw, stride, pad)
        gb = g2.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution; ``w`` has shape (C_in, C_out, kh, kw)."""
    B, C, H, W = x.shape
    cin, cout, kh, kw = w.shape
    if cin != C:
        raise ValueError(f"conv_transpose2d expects {cin} input channels, got {C}")
    oh = (H - 1) * stride - 2 * pad + kh
    ow = (W - 1) * stride - 2 * pad + kw
    w2 = w.data.reshape(cin, -1)
    x2 = x.data.reshape(B, C, H * W)
    cols = np.matmul(w2.T, x2)
    y = kernels.col2im(cols, (B, cout, oh, ow), kh, kw, stride, pad)
    if b is not None:
        y += b.data[None, :, None, None]

    def backward(g):
        gcols = kernels.im2col(g, kh, kw, stride, pad)
        gx = np.matmul(w2, gcols).reshape(x.shape) if _needs_grad(x) else None
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(w.shape) if _needs_grad(w) else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, backward)
