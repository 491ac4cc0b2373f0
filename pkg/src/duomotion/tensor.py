"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A Tensor wraps an ndarray and, when ``requires_grad`` is set anywhere in its
history, records the operation that produced it.  Calling ``backward()`` on a
scalar walks the tape in reverse topological order and accumulates gradients
into every reachable leaf.

Every operation checks its output for non-finite values and raises
NonFiniteError immediately, so a NaN cannot propagate silently.  The check can
be suspended with ``finite_checks(False)`` for hot loops that validate at
their own boundaries.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NonFiniteError(FloatingPointError):
    """A tensor operation produced NaN or infinity."""


_CHECK_FINITE = [True]


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable or disable per-operation finiteness checks."""
    _CHECK_FINITE.append(bool(enabled))
    try:
        yield
    finally:
        _CHECK_FINITE.pop()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        if _CHECK_FINITE[-1] and not np.all(np.isfinite(data)):
            raise NonFiniteError("tensor operation produced a non-finite value")
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)

        def bwd(g):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._node(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, Tensor._lift(other)

        def bwd(g):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(-g, b.data.shape))

        return Tensor._node(a.data - b.data, (a, b), bwd)

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)

        def bwd(g):
            a._accum(_unbroadcast(g * b.data, a.data.shape))
            b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._node(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._lift(other)

        def bwd(g):
            a._accum(_unbroadcast(g / b.data, a.data.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._node(a.data / b.data, (a, b), bwd)

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __neg__(self):
        a = self

        def bwd(g):
            a._accum(-g)

        return Tensor._node(-a.data, (a,), bwd)

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        a = self

        def bwd(g):
            a._accum(g * p * a.data ** (p - 1))

        return Tensor._node(a.data ** p, (a,), bwd)

    def __matmul__(self, other):
        a, b = self, Tensor._lift(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul requires operands with ndim >= 2")

        def bwd(g):
            a._accum(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            b._accum(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

        return Tensor._node(a.data @ b.data, (a, b), bwd)

    # -- elementwise functions -------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accum(g * out_data)

        return Tensor._node(out_data, (a,), bwd)

    def log(self):
        a = self

        def bwd(g):
            a._accum(g / a.data)

        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = np.log(a.data)
        return Tensor._node(out_data, (a,), bwd)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bwd(g):
            a._accum(g * 0.5 / out_data)

        return Tensor._node(out_data, (a,), bwd)

    def sin(self):
        a = self

        def bwd(g):
            a._accum(g * np.cos(a.data))

        return Tensor._node(np.sin(a.data), (a,), bwd)

    def cos(self):
        a = self

        def bwd(g):
            a._accum(-g * np.sin(a.data))

        return Tensor._node(np.cos(a.data), (a,), bwd)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def bwd(g):
            a._accum(g * (1.0 - out_data * out_data))

        return Tensor._node(out_data, (a,), bwd)

    def relu(self):
        a = self
        mask = a.data > 0

        def bwd(g):
            a._accum(g * mask)

        return Tensor._node(np.where(mask, a.data, 0.0), (a,), bwd)

    def abs(self):
        a = self
        sgn = np.sign(a.data)

        def bwd(g):
            a._accum(g * sgn)

        return Tensor._node(np.abs(a.data), (a,), bwd)

    def maximum(self, other):
        """Elementwise max; on ties the gradient goes to ``self``."""
        a, b = self, Tensor._lift(other)
        take_a = a.data >= b.data

        def bwd(g):
            a._accum(_unbroadcast(g * take_a, a.data.shape))
            b._accum(_unbroadcast(g * ~take_a, b.data.shape))

        return Tensor._node(np.maximum(a.data, b.data), (a, b), bwd)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bwd(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        n = a.data.size if axis is None else np.prod(
            [a.data.shape[i] for i in np.atleast_1d(axis)])

        def bwd(g):
            gg = g / n
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._node(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)

    # -- shape manipulation -------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def bwd(g):
            a._accum(g.reshape(a.data.shape))

        return Tensor._node(a.data.reshape(shape), (a,), bwd)

    def transpose(self, axes):
        a = self
        inv = np.argsort(axes)

        def bwd(g):
            a._accum(g.transpose(inv))

        return Tensor._node(a.data.transpose(axes), (a,), bwd)

    def swapaxes(self, ax1, ax2):
        a = self

        def bwd(g):
            a._accum(g.swapaxes(ax1, ax2))

        return Tensor._node(a.data.swapaxes(ax1, ax2), (a,), bwd)

    def __getitem__(self, key):
        a = self

        def bwd(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, key, g)
            a._accum(buf)

        return Tensor._node(a.data[key], (a,), bwd)

    # -- backward pass ---------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            if not np.all(np.isfinite(node.grad)):
                raise NonFiniteError("non-finite gradient encountered during backward pass")
            node._backward(node.grad)


# -- free functions ---------------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), bwd)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]

    def bwd(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    return Tensor._node(np.stack([t.data for t in tensors], axis=axis),
                        tuple(tensors), bwd)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the shift by the (detached) max is exact."""
    shifted = t - t.data.max(axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)
