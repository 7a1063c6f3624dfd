"""Dense real tensors with taped reverse-mode differentiation.

A Tensor wraps a numpy array (float64 by default, float32 allowed for
inference) and remembers the op that produced it. Calling ``backward`` on a
scalar walks the recorded graph in reverse topological order and accumulates
d(scalar)/d(leaf) into every ``requires_grad`` leaf.

The op vocabulary is the closed set the flow pipeline needs: elementwise
arithmetic, matmul, concat/reshape/transpose, gather / index_add, reductions
(sum, max), softmax, sigmoid, tanh, (leaky) relu, exp, sqrt, clip and where.
Index arguments (gather, index_add, where masks) are plain integer/bool
arrays: differentiation is with respect to values, never indices.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

DEFAULT_DTYPE = np.float64

# Per-op finite checks are opt-in (tests / gradcheck); they roughly double
# the cost of a forward pass at training scale.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor")

    # -- basics ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        # grad buffers are never mutated in place (they may be views of other
        # buffers); a second contribution reallocates instead
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    # -- backward ---------------------------------------------------------

    def backward(self):
        """Reverse-propagate from this scalar into all reachable leaves.

        Leaf gradients accumulate across calls (zero them between steps);
        interior gradients are transient and cleared on exit.
        """
        if self.data.size != 1:
            raise NumericError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data):
            raise NumericError("loss is not finite")
        topo = _toposort(self)
        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None:
                continue
            g = node.grad
            if g is None:
                continue
            if _DEBUG_CHECKS and not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient encountered during propagation")
            node._backward(g)
        for node in topo:
            if node._parents:
                node.grad = None


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
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
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """Non-differentiable tensor; float32 input stays float32 (inference mode)."""
    arr = np.asarray(x)
    if arr.dtype != np.float32:
        arr = arr.astype(DEFAULT_DTYPE)
    return Tensor(arr)


def parameter(x):
    return Tensor(np.array(x, dtype=DEFAULT_DTYPE), requires_grad=True)


def zeros(shape, dtype=None):
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


def _needs_grad(*ts):
    return any(t.requires_grad or t._parents for t in ts)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, backward):
    if any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


# -- elementwise arithmetic ------------------------------------------------
# python-number operands keep numpy's weak promotion (a float32 graph stays
# float32) and skip a tensor allocation


def add(a, b):
    if isinstance(a, (int, float)):
        a, b = b, a
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        b = float(b)  # numpy scalars are strongly typed; python floats are weak

        def back(g):
            a.accumulate_grad(g)

        return _make(a.data + b, (a,), back)
    b = as_tensor(b)
    out = a.data + b.data

    def back(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back)


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -b)
    if isinstance(a, (int, float)):
        return add(neg(b), a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back)


def mul(a, b):
    if isinstance(a, (int, float)):
        a, b = b, a
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        b = float(b)

        def back(g):
            a.accumulate_grad(g * b)

        return _make(a.data * b, (a,), back)
    b = as_tensor(b)
    out = a.data * b.data

    def back(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), back)


def div(a, b):
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    b = as_tensor(b)
    if isinstance(a, (int, float)):
        out = float(a) / b.data

        def back(g):
            b.accumulate_grad(_unbroadcast(-g * out / b.data, b.data.shape))

        return _make(out, (b,), back)
    a = as_tensor(a)
    out = a.data / b.data

    def back(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), back)


def neg(a):
    a = as_tensor(a)

    def back(g):
        a.accumulate_grad(-g)

    return _make(-a.data, (a,), back)


def square(a):
    a = as_tensor(a)

    def back(g):
        a.accumulate_grad(2.0 * a.data * g)

    return _make(a.data * a.data, (a,), back)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def back(g):
        a.accumulate_grad(g * 0.5 / out)

    return _make(out, (a,), back)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def back(g):
        a.accumulate_grad(g * out)

    return _make(out, (a,), back)


# -- structure ---------------------------------------------------------------


def matmul(a, b):
    """a @ b with a of rank 2 or 3 and b of rank 2."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (2, 3):
        raise ValueError(f"matmul supports (2|3)D @ 2D, got {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        a.accumulate_grad(g @ b.data.T)
        if a.ndim == 2:
            b.accumulate_grad(a.data.T @ g)
        else:
            k = a.data.shape[-1]
            m = g.shape[-1]
            b.accumulate_grad(a.data.reshape(-1, k).T @ g.reshape(-1, m))

    return _make(out, (a, b), back)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2D tensor")

    def back(g):
        a.accumulate_grad(g.T)

    return _make(a.data.T, (a,), back)


def reshape(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def back(g):
        a.accumulate_grad(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate_grad(piece)

    return _make(out, tuple(tensors), back)


def broadcast_to(a, shape):
    a = as_tensor(a)
    orig = a.data.shape

    def back(g):
        a.accumulate_grad(_unbroadcast(g, orig))

    return _make(np.broadcast_to(a.data, shape), (a,), back)


def gather(a, index):
    """Select rows of `a` (axis 0) by an integer array of any shape."""
    a = as_tensor(a)
    index = np.asarray(index)
    out = a.data[index]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        a.accumulate_grad(ga)

    return _make(out, (a,), back)


def index_add(length, index, values):
    """out[l] = sum of values rows whose index equals l; out has `length` rows."""
    values = as_tensor(values)
    index = np.asarray(index)
    out = np.zeros((length,) + values.data.shape[index.ndim:], dtype=values.dtype)
    np.add.at(out, index, values.data)

    def back(g):
        values.accumulate_grad(g[index])

    return _make(out, (values,), back)


# -- reductions ----------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(gg, a.data.shape))

    return _make(out, (a,), back)


def tmax(a, axis):
    """Max along `axis`; gradient flows to the first argmax (ties broken low)."""
    a = as_tensor(a)
    out = a.data.max(axis=axis)
    arg = a.data.argmax(axis=axis)

    def back(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(
            ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        a.accumulate_grad(ga)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- nonlinearities -------------------------------------------------------------


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (a,), back)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def back(g):
        a.accumulate_grad(g * (1.0 - out * out))

    return _make(out, (a,), back)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def back(g):
        a.accumulate_grad(g * mask)

    return _make(a.data * mask, (a,), back)


def leaky_relu(a, slope=0.1):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype, copy=False)

    def back(g):
        a.accumulate_grad(g * factor)

    return _make(a.data * factor, (a,), back)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate_grad(out * (g - inner))

    return _make(out, (a,), back)


def clip(a, lo, hi):
    """Clamp values; gradient passes only through the unclamped region."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def back(g):
        a.accumulate_grad(g * mask)

    return _make(np.clip(a.data, lo, hi), (a,), back)


def where(mask, a, b):
    """Elementwise select by a constant boolean mask (no gradient w.r.t. mask)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def back(g):
        a.accumulate_grad(_unbroadcast(np.where(mask, g, 0.0), a.data.shape))
        b.accumulate_grad(_unbroadcast(np.where(mask, 0.0, g), b.data.shape))

    return _make(out, (a, b), back)


def l2norm_rows(diff, guard=1e-30):
    """Row-wise Euclidean norm of an (..., c) tensor of differences.

    `guard` keeps the sqrt gradient finite at exactly-zero rows; it is far
    below float64 resolution so values are unaffected beyond ~1e-15.
    """
    return sqrt(tsum(square(diff), axis=-1) + guard)
