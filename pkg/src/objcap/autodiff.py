"""Reverse-mode automatic differentiation on numpy arrays.

Vector-level tape: every node holds a float64 ndarray, its parents, and a
closure producing vector-Jacobian products. backward() seeds a scalar root
with 1 and accumulates into .grad in reverse topological order. Gradients
accumulate across calls; zero_grad is explicit (the optimizer does it).

Nodes whose ancestors are all constants short-circuit to constants, so a
frozen network costs a forward pass only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DiffValue", "constant", "leaf", "backward",
    "add", "sub", "mul", "div", "neg", "pow_const", "exp", "log", "sqrt",
    "sin", "cos", "relu", "softplus", "sigmoid", "matmul", "vsum", "vmean",
    "cumsum_exclusive", "concat", "take_rows", "scatter_rows", "reshape",
    "getitem", "maximum_const", "minimum_const", "safe_pow",
    "rot_coef_a", "rot_coef_b", "stop_gradient",
    "dot_last", "norm_last", "normalize_last", "square",
]


class DiffValue:
    """One tape node. Treat .value as read-only once created."""

    __slots__ = ("value", "grad", "requires", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None, requires=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires = requires
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # arithmetic sugar; plain numbers/arrays wrap as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"DiffValue(shape={self.value.shape}, requires={self.requires})"


def constant(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x, requires=False)


def leaf(x) -> DiffValue:
    """Trainable parameter node."""
    return DiffValue(x, requires=True)


def _wrap(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x, requires=False)


def _node(value, parents, vjp) -> DiffValue:
    # constant folding: no differentiable ancestor, no tape entry
    for p in parents:
        if p.requires:
            return DiffValue(value, parents=parents, vjp=vjp, requires=True)
    return DiffValue(value, requires=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: DiffValue) -> None:
    """Accumulate d(root)/d(node) into .grad over the subgraph below root.

    root must be scalar (size 1). Existing grads are added to, not reset.
    """
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.value.shape}")
    if not root.requires:
        return

    # iterative DFS topological order (graphs get deep: per-layer chains)
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)

    seed = np.ones_like(root.value)
    root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# elementwise


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    val = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node(val, (a, b), vjp)


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    val = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _node(val, (a, b), vjp)


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    val = a.value * b.value

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    return _node(val, (a, b), vjp)


def div(a: DiffValue, b: DiffValue) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    val = a.value / b.value

    def vjp(g):
        return (_unbroadcast(g / b.value, a.value.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _node(val, (a, b), vjp)


def neg(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def square(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    return _node(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def pow_const(a: DiffValue, p: float) -> DiffValue:
    """a**p for a fixed exponent. Caller owns the domain (a > 0 unless p is
    a nonnegative integer)."""
    a = _wrap(a)
    val = a.value ** p

    def vjp(g):
        return (g * p * a.value ** (p - 1.0),)

    return _node(val, (a,), vjp)


def exp(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    val = np.exp(a.value)
    return _node(val, (a,), lambda g: (g * val,))


def log(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    val = np.log(a.value)
    return _node(val, (a,), lambda g: (g / a.value,))


def sqrt(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    val = np.sqrt(a.value)

    def vjp(g):
        return (g * 0.5 / val,)

    return _node(val, (a,), vjp)


def sin(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    return _node(np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def cos(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    return _node(np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def relu(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    val = np.maximum(a.value, 0.0)

    def vjp(g):
        return (g * (a.value > 0.0),)

    return _node(val, (a,), vjp)


def softplus(a: DiffValue) -> DiffValue:
    """log(1 + exp(x)), overflow-safe; derivative is sigmoid(x)."""
    a = _wrap(a)
    val = np.logaddexp(0.0, a.value)

    def vjp(g):
        return (g * _sigmoid_np(a.value),)

    return _node(val, (a,), vjp)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: DiffValue) -> DiffValue:
    a = _wrap(a)
    val = _sigmoid_np(np.asarray(a.value, dtype=np.float64))

    def vjp(g):
        return (g * val * (1.0 - val),)

    return _node(val, (a,), vjp)


def maximum_const(a: DiffValue, c: float) -> DiffValue:
    """max(a, c); subgradient 0 at the tie."""
    a = _wrap(a)
    val = np.maximum(a.value, c)

    def vjp(g):
        return (g * (a.value > c),)

    return _node(val, (a,), vjp)


def minimum_const(a: DiffValue, c: float) -> DiffValue:
    a = _wrap(a)
    val = np.minimum(a.value, c)

    def vjp(g):
        return (g * (a.value < c),)

    return _node(val, (a,), vjp)


def safe_pow(base: DiffValue, expo: DiffValue) -> DiffValue:
    """max(base, 0)**expo with exact endpoints: 0**q = 0, 1**q = 1.

    Used for tone mapping, so the forward must not perturb 0 or 1. Gradients
    clamp the base at 1e-12 and vanish where base <= 0. expo broadcasts
    against base.
    """
    base, expo = _wrap(base), _wrap(expo)
    b = np.maximum(base.value, 0.0)
    val = np.power(b, expo.value)

    def vjp(g):
        pos = base.value > 0.0
        bc = np.maximum(b, 1e-12)
        db = np.where(pos, expo.value * np.power(bc, expo.value - 1.0), 0.0)
        dq = np.where(pos, val * np.log(bc), 0.0)
        return (_unbroadcast(g * db, base.value.shape),
                _unbroadcast(g * dq, expo.value.shape))

    return _node(val, (base, expo), vjp)


# ---------------------------------------------------------------------------
# rotation coefficients A(s) = sin(th)/th, B(s) = (1-cos(th))/th^2, s = th^2.
# Written as primitives of s so the axis-angle map stays smooth through
# s -> 0; Taylor below the switch point, closed forms above.

_ROT_EPS = 1e-8


def _rot_a_np(s):
    s = np.asarray(s, dtype=np.float64)
    small = s < _ROT_EPS
    th = np.sqrt(np.where(small, 1.0, s))
    out = np.where(small,
                   1.0 - s / 6.0 + s * s / 120.0,
                   np.sin(th) / th)
    return out


def _rot_a_grad_np(s):
    s = np.asarray(s, dtype=np.float64)
    small = s < _ROT_EPS
    th = np.sqrt(np.where(small, 1.0, s))
    # d/ds [sin(th)/th] with th = sqrt(s): (th cos th - sin th) / (2 th^3)
    return np.where(small,
                    -1.0 / 6.0 + s / 60.0,
                    (th * np.cos(th) - np.sin(th)) / (2.0 * th ** 3))


def _rot_b_np(s):
    s = np.asarray(s, dtype=np.float64)
    small = s < _ROT_EPS
    ss = np.where(small, 1.0, s)  # dodge 0/0 in the dead branch
    th = np.sqrt(ss)
    return np.where(small,
                    0.5 - s / 24.0 + s * s / 720.0,
                    (1.0 - np.cos(th)) / ss)


def _rot_b_grad_np(s):
    s = np.asarray(s, dtype=np.float64)
    small = s < _ROT_EPS
    ss = np.where(small, 1.0, s)
    th = np.sqrt(ss)
    # d/ds [(1-cos th)/s]: (th sin th - 2(1 - cos th)) / (2 s^2)
    return np.where(small,
                    -1.0 / 24.0 + s / 360.0,
                    (th * np.sin(th) - 2.0 * (1.0 - np.cos(th))) / (2.0 * ss * ss))


def rot_coef_a(s: DiffValue) -> DiffValue:
    s = _wrap(s)
    val = _rot_a_np(s.value)

    def vjp(g):
        return (g * _rot_a_grad_np(s.value),)

    return _node(val, (s,), vjp)


def rot_coef_b(s: DiffValue) -> DiffValue:
    s = _wrap(s)
    val = _rot_b_np(s.value)

    def vjp(g):
        return (g * _rot_b_grad_np(s.value),)

    return _node(val, (s,), vjp)


# ---------------------------------------------------------------------------
# shape / reduction


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    """2-D matrix product only (keep the vjp obvious)."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    val = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _node(val, (a, b), vjp)


def vsum(a: DiffValue, axis=None, keepdims=False) -> DiffValue:
    a = _wrap(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        gg = g
        if not keepdims:
            for d in sorted(ax):
                gg = np.expand_dims(gg, d)
        return (np.broadcast_to(gg, a.value.shape),)

    return _node(val, (a,), vjp)


def vmean(a: DiffValue, axis=None, keepdims=False) -> DiffValue:
    a = _wrap(a)
    if axis is None:
        n = a.value.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for d in ax:
            n *= a.value.shape[d]
    return mul(vsum(a, axis=axis, keepdims=keepdims), constant(1.0 / n))


def cumsum_exclusive(a: DiffValue) -> DiffValue:
    """Exclusive prefix sum along the last axis: out[..., i] = sum_{j<i} a[..., j]."""
    a = _wrap(a)
    c = np.cumsum(a.value, axis=-1)
    val = np.concatenate([np.zeros_like(c[..., :1]), c[..., :-1]], axis=-1)

    def vjp(g):
        # dL/da_j = sum_{i>j} g_i: shifted reverse cumsum
        rc = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        out = np.concatenate([rc[..., 1:], np.zeros_like(rc[..., :1])], axis=-1)
        return (out,)

    return _node(val, (a,), vjp)


def concat(parts, axis=-1) -> DiffValue:
    parts = [_wrap(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        g = np.moveaxis(g, axis, -1)
        outs = []
        for i in range(len(parts)):
            sl = g[..., bounds[i]:bounds[i + 1]]
            outs.append(np.moveaxis(sl, -1, axis))
        return tuple(outs)

    return _node(val, tuple(parts), vjp)


def take_rows(a: DiffValue, idx: np.ndarray) -> DiffValue:
    """Gather rows along axis 0 by an int index array. Backward scatter-adds."""
    a = _wrap(a)
    idx = np.asarray(idx)
    val = a.value[idx]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(val, (a,), vjp)


def scatter_rows(n_rows: int, idx: np.ndarray, values: DiffValue) -> DiffValue:
    """Write values into a zero array of n_rows rows at distinct indices.

    Indices must be unique (assembly of disjoint ray groups); duplicates
    would silently drop contributions in the forward write.
    """
    values = _wrap(values)
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + values.value.shape[1:], dtype=np.float64)
    out[idx] = values.value

    def vjp(g):
        return (g[idx],)

    return _node(out, (values,), vjp)


def reshape(a: DiffValue, shape) -> DiffValue:
    a = _wrap(a)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: DiffValue, key) -> DiffValue:
    """Basic (slice/int) indexing. Backward writes g into zeros; basic
    indexing is injective so plain assignment is correct."""
    a = _wrap(a)
    val = a.value[key]

    def vjp(g):
        out = np.zeros_like(a.value)
        out[key] = g
        return (out,)

    return _node(val, (a,), vjp)


def stop_gradient(a: DiffValue) -> DiffValue:
    return DiffValue(_wrap(a).value, requires=False)


# ---------------------------------------------------------------------------
# composites used everywhere


def dot_last(a: DiffValue, b: DiffValue) -> DiffValue:
    return vsum(mul(a, b), axis=-1, keepdims=True)


def norm_last(a: DiffValue, eps: float = 1e-12) -> DiffValue:
    return sqrt(add(vsum(square(a), axis=-1, keepdims=True), constant(eps)))


def normalize_last(a: DiffValue, eps: float = 1e-12) -> DiffValue:
    return div(a, norm_last(a, eps))
