"""Small reverse-mode differentiation tape over numpy arrays.

Every op accepts either a :class:`Var` or a plain array.  When no argument is a
``Var`` the op returns a plain ``ndarray``, so model code written against this
module runs unchanged in the simulator (no tape) and in training (tape).

Leading axes are batch axes throughout; broadcasting follows numpy and the
backward pass sums gradients over broadcast dimensions.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents", "grad")
    __array_priority__ = 100.0

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents  # tuple of (Var, backward_fn)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _is_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(out, *links):
    parents = tuple((p, fn) for p, fn in links if isinstance(p, Var))
    return Var(out, parents)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not _is_var(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not _is_var(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not _is_var(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    if not _is_var(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(g / bv, av.shape)),
                 (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a, dtype=float)
    return _make(-a.value, (a, lambda g: -g))


def power(a, p):
    av = value(a)
    out = av ** p
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: g * p * av ** (p - 1)))


def square(a):
    return mul(a, a)


def sin(a):
    av = value(a)
    out = np.sin(av)
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: g * np.cos(av)))


def cos(a):
    av = value(a)
    out = np.cos(av)
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: -g * np.sin(av)))


def tanh(a):
    out = np.tanh(value(a))
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: g * (1.0 - out * out)))


def exp(a):
    out = np.exp(value(a))
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: g * out))


def sqrt(a):
    out = np.sqrt(value(a))
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: g * 0.5 / out))


def relu(a):
    """max(0, a); the subgradient at exactly 0 is taken as 0."""
    av = value(a)
    out = np.maximum(av, 0.0)
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: g * (av > 0.0)))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)
    if not _is_var(a, b):
        return out
    return _make(out, (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), av.shape)),
                 (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), bv.shape)))


def minimum(a, b):
    return where(value(a) <= value(b), a, b)


def maximum(a, b):
    return where(value(a) >= value(b), a, b)


# ----------------------------------------------------------------------------
# shape / reduction


def sum(a, axis=None):
    av = value(a)
    out = av.sum(axis=axis)
    if not isinstance(a, Var):
        return out

    def back(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), av.shape).copy()

    return _make(out, (a, back))


def mean(a, axis=None):
    n = value(a).size if axis is None else value(a).shape[axis]
    return sum(a, axis) * (1.0 / n)


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    if not isinstance(a, Var):
        return out

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice, np.integer)) for p in parts)

    def back(g):
        full = np.zeros_like(av)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return full

    return _make(out, (a, back))


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: g.reshape(av.shape)))


def swapaxes(a, i, j):
    out = np.swapaxes(value(a), i, j)
    if not isinstance(a, Var):
        return out
    return _make(out, (a, lambda g: np.swapaxes(g, i, j)))


def stack(xs, axis=-1):
    vals = [value(x) for x in xs]
    vals = np.broadcast_arrays(*vals)
    out = np.stack(vals, axis=axis)
    if not _is_var(*xs):
        return out
    links = []
    for k, x in enumerate(xs):
        if isinstance(x, Var):
            shape = x.value.shape
            links.append((x, lambda g, k=k, shape=shape:
                          _unbroadcast(np.take(g, k, axis=axis), shape)))
    return _make(out, *links)


def concatenate(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _is_var(*xs):
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    links = []
    for k, x in enumerate(xs):
        if isinstance(x, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            links.append((x, lambda g, sl=tuple(sl): g[sl]))
    return _make(out, *links)


# ----------------------------------------------------------------------------
# linear algebra (batched over leading axes)


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    if not _is_var(a, b):
        return out

    def back_a(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
        else:
            ga = g @ np.swapaxes(bv, -1, -2) if av.ndim > 1 else (g[..., None, :] @ np.swapaxes(bv, -1, -2))[..., 0, :]
        return _unbroadcast(ga, av.shape)

    def back_b(g):
        if av.ndim == 1:
            gb = np.multiply.outer(av, g) if bv.ndim > 1 else g * av
        else:
            gb = np.swapaxes(av, -1, -2) @ g if bv.ndim > 1 else (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0]
        return _unbroadcast(gb, bv.shape)

    return _make(out, (a, back_a), (b, back_b))


def solve(A, b):
    """Batched ``A x = b`` with ``b`` of shape (..., n).  Gradient by the
    implicit-function rule: ``b̄ = A⁻ᵀ x̄``, ``Ā = -b̄ xᵀ``."""
    Av, bv = value(A), value(b)
    x = np.linalg.solve(Av, bv[..., None])[..., 0]
    if not _is_var(A, b):
        return x

    def back_b(g):
        return _unbroadcast(np.linalg.solve(np.swapaxes(Av, -1, -2), g[..., None])[..., 0], bv.shape)

    def back_A(g):
        gb = np.linalg.solve(np.swapaxes(Av, -1, -2), g[..., None])[..., 0]
        return _unbroadcast(-gb[..., :, None] * x[..., None, :], Av.shape)

    return _make(x, (A, back_A), (b, back_b))


# ----------------------------------------------------------------------------
# backward pass


def backward(out, seed=None):
    """Accumulate d(out)/d(leaf) into ``.grad`` of every reachable Var."""
    order = []
    seen = set()
    stack_ = [(out, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    for node in order:
        node.grad = None
    out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=float)
    for node in reversed(order):
        if node.grad is None:
            continue
        for p, fn in node.parents:
            g = fn(node.grad)
            p.grad = g if p.grad is None else p.grad + g


def grad(fn, x):
    """Value and gradient of scalar ``fn(Var(x))`` with respect to ``x``."""
    xv = Var(np.array(x, dtype=float))
    out = fn(xv)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(xv.value)
    backward(out)
    g = xv.grad if xv.grad is not None else np.zeros_like(xv.value)
    return float(out.value), g
