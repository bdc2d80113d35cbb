"""Reverse-mode automatic differentiation over numpy float64 arrays.

A Tensor wraps an ndarray and remembers how it was produced; calling
``backward()`` on a scalar result walks the tape and accumulates ``.grad``
on every tensor created with ``requires_grad=True``. Graphs are only built
when some input requires gradients, so evaluation-time code pays almost
nothing for running through the same functions.
"""

import numpy as np

__all__ = [
    "Tensor", "as_tensor", "parameter", "add", "sub", "mul", "div", "neg",
    "matmul", "concat", "stack", "relu", "sigmoid", "tanh", "exp", "log",
    "sqrt", "softplus", "power", "tsum", "tmean", "tmax", "getitem",
    "transpose", "log_softmax", "smooth_l1",
]


class Tensor:
    """Node in the computation graph; ``value`` is always float64."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    # keep numpy from absorbing Tensors into object arrays; reflected
    # operators below handle ndarray-op-Tensor instead
    __array_ufunc__ = None

    def __init__(self, value, requires_grad=False, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._vjp = vjp if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is not None:
                node._vjp(node.grad)

    # operator sugar; the other operand may be a plain number/ndarray
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value):
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _topo_order(root):
    order, visited, stack = [], set(), [(root, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad += g


def _sum_to_shape(g, shape):
    """Undo numpy broadcasting: reduce gradient ``g`` back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _unary(x, value, dfn):
    def vjp(g):
        _accum(x, g * dfn())
    return Tensor(value, parents=(x,), vjp=vjp)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g, a.value.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(g, b.value.shape))
    return Tensor(a.value + b.value, parents=(a, b), vjp=vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g, a.value.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(-g, b.value.shape))
    return Tensor(a.value - b.value, parents=(a, b), vjp=vjp)


def neg(x):
    return _unary(x, -x.value, lambda: -1.0)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g * b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(g * a.value, b.value.shape))
    return Tensor(a.value * b.value, parents=(a, b), vjp=vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        if a.requires_grad:
            _accum(a, _sum_to_shape(g / b.value, a.value.shape))
        if b.requires_grad:
            _accum(b, _sum_to_shape(-g * a.value / (b.value * b.value), b.value.shape))
    return Tensor(a.value / b.value, parents=(a, b), vjp=vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim > 2 or bv.ndim > 2:
        raise ValueError("matmul supports 1-D and 2-D operands only")

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            if a.requires_grad:
                _accum(a, g @ bv.T)
            if b.requires_grad:
                _accum(b, av.T @ g)
        elif av.ndim == 2 and bv.ndim == 1:
            if a.requires_grad:
                _accum(a, np.outer(g, bv))
            if b.requires_grad:
                _accum(b, av.T @ g)
        elif av.ndim == 1 and bv.ndim == 2:
            if a.requires_grad:
                _accum(a, bv @ g)
            if b.requires_grad:
                _accum(b, np.outer(av, g))
        else:  # both 1-D: inner product
            if a.requires_grad:
                _accum(a, g * bv)
            if b.requires_grad:
                _accum(b, g * av)
    return Tensor(av @ bv, parents=(a, b), vjp=vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])
    return Tensor(np.concatenate([t.value for t in tensors], axis=axis),
                  parents=tuple(tensors), vjp=vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))
    return Tensor(np.stack([t.value for t in tensors], axis=axis),
                  parents=tuple(tensors), vjp=vjp)


def relu(x):
    return _unary(x, np.maximum(x.value, 0.0), lambda: (x.value > 0.0).astype(np.float64))


def sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-x.value))
    return _unary(x, s, lambda: s * (1.0 - s))


def tanh(x):
    t = np.tanh(x.value)
    return _unary(x, t, lambda: 1.0 - t * t)


def exp(x):
    e = np.exp(x.value)
    return _unary(x, e, lambda: e)


def log(x):
    return _unary(x, np.log(x.value), lambda: 1.0 / x.value)


def sqrt(x):
    r = np.sqrt(x.value)
    return _unary(x, r, lambda: 0.5 / r)


def softplus(x):
    """log(1 + e^x), computed without overflow."""
    v = np.maximum(x.value, 0.0) + np.log1p(np.exp(-np.abs(x.value)))
    return _unary(x, v, lambda: 1.0 / (1.0 + np.exp(-x.value)))


def power(x, p):
    """x**p for a constant exponent p."""
    return _unary(x, x.value ** p, lambda: p * x.value ** (p - 1))


def tsum(x, axis=None):
    def vjp(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.value.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.value.shape).copy())
    return Tensor(x.value.sum(axis=axis), parents=(x,), vjp=vjp)


def tmean(x, axis=None):
    n = x.value.size if axis is None else x.value.shape[axis]

    def vjp(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.value.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.value.shape).copy())
    return Tensor(x.value.mean(axis=axis), parents=(x,), vjp=vjp)


def tmax(x, axis=None):
    """Max reduction; the subgradient flows to the first attaining entry."""
    if axis is not None:
        raise NotImplementedError("tmax supports full reduction only")
    idx = int(np.argmax(x.value))

    def vjp(g):
        full = np.zeros_like(x.value)
        full.flat[idx] = float(g)
        _accum(x, full)
    return Tensor(x.value.max(), parents=(x,), vjp=vjp)


def getitem(x, key):
    def vjp(g):
        full = np.zeros_like(x.value)
        np.add.at(full, key, g)
        _accum(x, full)
    return Tensor(x.value[key], parents=(x,), vjp=vjp)


def transpose(x):
    def vjp(g):
        _accum(x, g.T)
    return Tensor(x.value.T, parents=(x,), vjp=vjp)


def log_softmax(x, axis=-1):
    z = x.value - x.value.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        _accum(x, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))
    return Tensor(ls, parents=(x,), vjp=vjp)


def smooth_l1(x):
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    v = x.value
    out = np.where(np.abs(v) < 1.0, 0.5 * v * v, np.abs(v) - 0.5)

    def dfn():
        return np.where(np.abs(v) < 1.0, v, np.sign(v))
    return _unary(x, out, dfn)
