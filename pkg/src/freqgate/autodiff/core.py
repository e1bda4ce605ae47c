"""Dense float64 tensors with reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient, the output records its inputs and a backward rule mapping the
output gradient to one gradient per input.  :meth:`Tensor.backward` walks the
recorded graph once in reverse topological order, summing gradients that
reach a node along several paths.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
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

    # operator sugar ------------------------------------------------------
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
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward):
    """Wrap ``data`` as the output of an operation on ``parents``."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y)

    def backward(g):
        return unbroadcast(g, x.shape), unbroadcast(g, y.shape)

    return make_node(x.data + y.data, (x, y), backward)


def sub(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y)

    def backward(g):
        return unbroadcast(g, x.shape), unbroadcast(-g, y.shape)

    return make_node(x.data - y.data, (x, y), backward)


def mul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y)

    def backward(g):
        return unbroadcast(g * y.data, x.shape), unbroadcast(g * x.data, y.shape)

    return make_node(x.data * y.data, (x, y), backward)


def div(x, y):
    x, y = as_tensor(x), as_tensor(y)
    _broadcast_shape(x, y)
    out = x.data / y.data

    def backward(g):
        gx = g / y.data
        return unbroadcast(gx, x.shape), unbroadcast(-gx * out, y.shape)

    return make_node(out, (x, y), backward)


def scale(x, a):
    """Multiply by a constant scalar."""
    x = as_tensor(x)
    a = float(a)
    return make_node(x.data * a, (x,), lambda g: (g * a,))


def power(x, p):
    x = as_tensor(x)
    p = float(p)
    return make_node(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def square(x):
    x = as_tensor(x)
    return make_node(x.data**2, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (0.5 * g / out,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out**2),))


def sigmoid(x):
    x = as_tensor(x)
    out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


_branch_log = None


@contextmanager
def record_branches():
    """Collect the branch taken by every ReLU and clamp element inside the block.

    Yields a list that receives one integer array per call, so two runs can
    be compared to tell whether a perturbation crossed a kink.
    """
    global _branch_log
    previous, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = previous


def relu(x):
    x = as_tensor(x)
    on = x.data > 0
    if _branch_log is not None:
        _branch_log.append(on.astype(np.int8))
    return make_node(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def clamp(x, lo=None, hi=None):
    """Clip to ``[lo, hi]``; gradient flows only strictly inside the interval."""
    x = as_tensor(x)
    lo = -np.inf if lo is None else lo
    hi = np.inf if hi is None else hi
    inside = (x.data > lo) & (x.data < hi)
    if _branch_log is not None:
        _branch_log.append((x.data >= hi).astype(np.int8) - (x.data <= lo).astype(np.int8))
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum_(x, axes, keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, index):
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(x.shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(x.data[index]), (x,), backward)


def take(x, indices, axis):
    """Select entries along one axis; repeated indices accumulate gradients."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim

    def backward(g):
        full = np.zeros(x.shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return make_node(np.take(x.data, indices, axis=axis), (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_node(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim < 1 or y.ndim < 1:
        raise ValueError("matmul needs at least 1-D operands")
    if x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {x.shape} @ {y.shape}")

    def backward(g):
        xd, yd = x.data, y.data
        gg = g
        if xd.ndim == 1:
            xd = xd[None, :]
            gg = np.expand_dims(gg, -2)
        if yd.ndim == 1:
            yd = yd[:, None]
            gg = np.expand_dims(gg, -1)
        gx = gg @ np.swapaxes(yd, -1, -2)
        gy = np.swapaxes(xd, -1, -2) @ gg
        if x.ndim == 1:
            gx = gx.squeeze(-2)
        if y.ndim == 1:
            gy = gy.squeeze(-1)
        return unbroadcast(gx, x.shape), unbroadcast(gy, y.shape)

    return make_node(x.data @ y.data, (x, y), backward)


def affine(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x``."""
    out = matmul(x, transpose(as_tensor(w)))
    return out if b is None else add(out, b)


def mse(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"mse shape mismatch {x.shape} vs {y.shape}")
    diff = x.data - y.data
    n = diff.size

    def backward(g):
        gx = (2.0 / n) * g * diff
        return gx, -gx

    return make_node(np.asarray(np.mean(diff**2)), (x, y), backward)
