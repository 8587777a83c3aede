"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operator set is deliberately small: exactly what a patch transformer
encoder, its contrastive losses, and AdamW need. Each operation records a
backward closure over its inputs; ``Tensor.backward`` walks the recorded
graph once in reverse topological order and accumulates gradients into
every reachable tensor with ``requires_grad``.

Conventions:
  * all data is float64 so finite-difference checks are trustworthy
  * randomness (dropout) always comes from an explicit numpy Generator
  * a recorded graph can be traversed once; a second backward raises
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, InputError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "concat",
    "dropout",
    "exp",
    "gather_rows",
    "log",
    "logsumexp",
    "matmul",
    "power",
    "relu",
    "softmax",
    "sqrt",
]

_grad_enabled = True

# Sentinel marking a node whose backward closure has already run.
_CONSUMED = object()


class no_grad:
    """Context manager that disables graph recording (pure forward math)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._ctx = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same data outside the graph."""
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # -- graph ----------------------------------------------------------

    def backward(self):
        """Populate gradients of every requires_grad tensor reachable
        from this scalar. The traversed graph is consumed afterwards."""
        if self.data.size != 1:
            raise GraphError(
                f"backward() needs a scalar loss, got shape {tuple(self.shape)}"
            )
        if self._ctx is _CONSUMED:
            raise GraphError(
                "graph already consumed by a previous backward(); "
                "rebuild the forward pass"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            ctx = t._ctx
            if ctx is _CONSUMED:
                raise GraphError(
                    "stale graph: a node was already consumed by an "
                    "earlier backward()"
                )
            if ctx is None:
                continue
            stack.append((t, True))
            for p in ctx.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            ctx = t._ctx
            if t.grad is None:
                t._ctx = _CONSUMED
                continue
            grads = ctx.backward(t.grad)
            for p, g in zip(ctx.parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g
            t._ctx = _CONSUMED

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    # -- shape and reductions ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _reduce_mean(self, axis, keepdims)

    def var(self, axis=-1, keepdims=False):
        """Population variance (divide by the axis length, not length-1)."""
        m = self.mean(axis, keepdims=True)
        d = self - m
        return (d * d).mean(axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes if axes else None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return _transpose(self, tuple(axes))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Create an op output, recording the node when grad mode is on."""
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._ctx = _Node(parents, backward)
    return out


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape the operand had before numpy
    broadcasting expanded it."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make(data, (a, b), bwd)


def div(a, b):
    """Elementwise quotient. Denominator guarding is the call site's job
    (e.g. layer norm adds its epsilon before dividing)."""
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * data / b.data, b.shape),
        )

    return _make(data, (a, b), bwd)


def neg(a):
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a):
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _wrap(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def power(a, p):
    """a ** p for a constant scalar exponent p."""
    a = _wrap(a)
    p = float(p)
    data = a.data**p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bwd)


def dropout(x, p, rng=None, train=False):
    """Inverted dropout: zero a fraction p and scale survivors by 1/(1-p).

    Identity in eval mode or at p == 0; no randomness is consumed then.
    """
    if not 0.0 <= p < 1.0:
        raise InputError(f"dropout probability must be in [0, 1), got {p}")
    x = _wrap(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise InputError("dropout in train mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bwd(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bwd)


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch dims.

    Both operands must have ndim >= 2.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(
            f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}"
        ) from e

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bwd)


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.ascontiguousarray(np.broadcast_to(g, shape))


def _reduce_sum(x, axis, keepdims):
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        return (_spread(g, x.shape, axes, keepdims),)

    return _make(data, (x,), bwd)


def _reduce_mean(x, axis, keepdims):
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if x.ndim else 1
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        return (_spread(g, x.shape, axes, keepdims) / count,)

    return _make(data, (x,), bwd)


# -- shape surgery ---------------------------------------------------------


def _reshape(x, shape):
    x = _wrap(x)
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make(x.data.reshape(shape), (x,), bwd)


def _transpose(x, axes):
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bwd)


def _getitem(x, key):
    """Basic (slice/int/tuple) indexing with gradient scatter."""
    x = _wrap(x)
    data = np.ascontiguousarray(x.data[key])

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[key] = g
        return (buf,)

    return _make(data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise InputError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(
            np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis)
        )

    return _make(data, tuple(tensors), bwd)


def gather_rows(x, indices):
    """out[k] = x[indices[k]]; the backward pass scatter-adds into rows,
    so repeated indices accumulate."""
    x = _wrap(x)
    indices = np.asarray(indices, dtype=np.int64)
    data = x.data[indices]

    def bwd(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, indices, g)
        return (buf,)

    return _make(data, (x,), bwd)


# -- composite numerically stable ops ---------------------------------------


def softmax(x, axis=-1):
    """Stable softmax: shifts by the (detached) max before exponentiating,
    which leaves the value and the gradient exact."""
    x = _wrap(x)
    if not -x.ndim <= axis < x.ndim:
        raise InputError(f"softmax axis {axis} invalid for ndim {x.ndim}")
    m = x.data.max(axis=axis, keepdims=True)
    e = exp(sub(x, m))
    return div(e, e.sum(axis, keepdims=True))


def logsumexp(x, axis=-1, keepdims=False):
    x = _wrap(x)
    if not -x.ndim <= axis < x.ndim:
        raise InputError(f"logsumexp axis {axis} invalid for ndim {x.ndim}")
    m = x.data.max(axis=axis, keepdims=True)
    s = exp(sub(x, m)).sum(axis, keepdims=True)
    out = add(log(s), m)
    if keepdims:
        return out
    shape = list(out.shape)
    shape.pop(axis % x.ndim)
    return out.reshape(shape)
