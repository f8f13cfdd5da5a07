"""Reverse-mode automatic differentiation over dense numpy arrays.

Every op in this module accepts either plain ``np.ndarray``/float operands or
:class:`Var` nodes.  When no operand is a ``Var`` the op is evaluated eagerly
with numpy and a plain array is returned, so model code is written once and
runs both with and without a tape.  Both paths execute the identical numpy
expression, which keeps taped and untaped results bit-identical.
"""
from __future__ import annotations

from typing import Any, Callable, Hashable, Sequence

import numpy as np
from scipy.special import expit

LN10 = float(np.log(10.0))


class Var:
    """A node on a :class:`Tape`."""

    __slots__ = ("value", "args", "vjp", "fwd", "tape", "index", "key")
    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, tape, value, args=(), vjp=None, fwd=None, key=None):
        self.value = value
        self.args = args
        self.vjp = vjp
        self.fwd = fwd
        self.tape = tape
        self.key = key
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, index={self.index})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of operations with a parameter registry.

    Parameters are registered under hashable keys with :meth:`param`; asking
    for the same key twice returns the same node so gradients accumulate.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[Hashable, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, key=None) -> Var:
        return Var(self, np.asarray(value, dtype=float), key=key)

    def param(self, key: Hashable, value) -> Var:
        v = self.params.get(key)
        if v is None:
            v = self.leaf(value, key=key)
            self.params[key] = v
        return v

    def backward(self, out: Var, seed: float = 1.0) -> "GradStore":
        """Gradients of scalar ``out`` with respect to every registered leaf."""
        if not isinstance(out, Var) or out.tape is not self:
            raise ValueError("backward target must be a Var recorded on this tape")
        if np.size(out.value) != 1:
            raise ValueError(
                f"backward needs a scalar output, got shape {np.shape(out.value)}")
        grads: dict[int, np.ndarray] = {out.index: np.full(np.shape(out.value), float(seed))}
        leaf_grads: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: out.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.vjp is None:
                leaf_grads[node.index] = g
                continue
            for a, ga in zip(node.args, node.vjp(g)):
                if ga is None or not isinstance(a, Var):
                    continue
                prev = grads.get(a.index)
                grads[a.index] = ga if prev is None else prev + ga
        return GradStore(self, leaf_grads)

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> list:
        """Recompute every node value from the leaves, in recording order.

        ``overrides`` maps leaf indices to replacement values.  The recorded
        values are left untouched; the recomputed list is returned.
        """
        overrides = overrides or {}
        vals: list = [None] * len(self.nodes)
        for node in self.nodes:
            if node.fwd is None:
                vals[node.index] = overrides.get(node.index, node.value)
            else:
                vals[node.index] = node.fwd(*[
                    vals[a.index] if isinstance(a, Var) else a for a in node.args])
        return vals


class GradStore:
    """Gradients keyed by parameter key (and reachable by leaf node)."""

    def __init__(self, tape: Tape, leaf_grads: dict[int, np.ndarray]):
        self._tape = tape
        self._leaf = leaf_grads

    def wrt(self, v: Var) -> np.ndarray:
        g = self._leaf.get(v.index)
        return np.zeros(np.shape(v.value)) if g is None else g

    def __getitem__(self, key) -> np.ndarray:
        return self.wrt(self._tape.params[key])

    def __contains__(self, key) -> bool:
        return key in self._tape.params

    def keys(self):
        return self._tape.params.keys()

    def items(self):
        for k in self._tape.params:
            yield k, self[k]

    def as_dict(self) -> dict:
        return {k: self[k] for k in self._tape.params}


def backward(tape: Tape, out: Var, seed: float = 1.0) -> GradStore:
    return tape.backward(out, seed)


# --------------------------------------------------------------------------
# op machinery

def _tape_of(args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _val(a):
    return a.value if isinstance(a, Var) else a


def _unbroadcast(g, shape):
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _apply(fwd: Callable, vjp: Callable, *args):
    """Evaluate ``fwd`` on operand values; record a node if any operand is a Var.

    ``vjp(g, vals, out)`` returns one gradient (or None) per operand, already
    shaped like the operand or broadcast-compatible with it.
    """
    tape = _tape_of(args)
    vals = [_val(a) for a in args]
    out = fwd(*vals)
    if tape is None:
        return out
    frozen = tuple(a if isinstance(a, Var) else a for a in args)

    def node_vjp(g):
        gs = vjp(g, vals, out)
        return tuple(None if gi is None else _unbroadcast(gi, np.shape(v))
                     for gi, v in zip(gs, vals))

    return Var(tape, out, frozen, node_vjp, fwd)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """Strip the tape: the numpy value of ``x``."""
    return _val(x)


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    return _apply(np.add, lambda g, v, o: (g, g), a, b)


def sub(a, b):
    return _apply(np.subtract, lambda g, v, o: (g, -g), a, b)


def mul(a, b):
    return _apply(np.multiply, lambda g, v, o: (g * v[1], g * v[0]), a, b)


def div(a, b):
    return _apply(np.divide,
                  lambda g, v, o: (g / v[1], -g * v[0] / (v[1] * v[1])), a, b)


def neg(a):
    return _apply(np.negative, lambda g, v, o: (-g,), a)


def power(a, k: float):
    k = float(k)
    return _apply(lambda x: x ** k,
                  lambda g, v, o: (g * k * v[0] ** (k - 1.0),), a)


def exp(a):
    return _apply(np.exp, lambda g, v, o: (g * o,), a)


def log(a):
    return _apply(np.log, lambda g, v, o: (g / v[0],), a)


def log10(a):
    return _apply(np.log10, lambda g, v, o: (g / (v[0] * LN10),), a)


def sqrt(a):
    return _apply(np.sqrt, lambda g, v, o: (g * 0.5 / o,), a)


def sin(a):
    return _apply(np.sin, lambda g, v, o: (g * np.cos(v[0]),), a)


def cos(a):
    return _apply(np.cos, lambda g, v, o: (-g * np.sin(v[0]),), a)


def relu(a):
    return _apply(lambda x: np.maximum(x, 0.0),
                  lambda g, v, o: (g * (v[0] > 0.0),), a)


def sigmoid(a):
    return _apply(expit, lambda g, v, o: (g * o * (1.0 - o),), a)


def absolute(a):
    return _apply(np.abs, lambda g, v, o: (g * np.sign(v[0]),), a)


def maximum(a, b):
    def vjp(g, v, o):
        m = v[0] >= v[1]
        return g * m, g * ~m
    return _apply(np.maximum, vjp, a, b)


def minimum(a, b):
    def vjp(g, v, o):
        m = v[0] <= v[1]
        return g * m, g * ~m
    return _apply(np.minimum, vjp, a, b)


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _apply(lambda x, y: np.where(cond, x, y),
                  lambda g, v, o: (g * cond, g * ~cond), a, b)


# --------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b):
    def vjp(g, v, o):
        x, y = v
        if x.ndim == 1 and y.ndim == 2:
            return g @ y.T, np.outer(x, g)
        if x.ndim == 2 and y.ndim == 1:
            return np.outer(g, y), x.T @ g
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g
    return _apply(np.matmul, vjp, a, b)


def transpose(a):
    return _apply(np.transpose, lambda g, v, o: (np.transpose(g),), a)


def reshape(a, shape):
    return _apply(lambda x: np.reshape(x, shape),
                  lambda g, v, o: (np.reshape(g, np.shape(v[0])),), a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def vjp(g, v, o):
        shape = np.shape(v[0])
        if axis is None:
            return (np.broadcast_to(g, shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape),)
    return _apply(lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, a)


def mean(a, axis=None, keepdims=False):
    n = np.size(_val(a)) if axis is None else np.shape(_val(a))[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def dot(a, b):
    """Row-wise inner product over the last axis."""
    return sum(mul(a, b), axis=-1)


def norm(a, axis=-1, keepdims=False):
    return sqrt(sum(mul(a, a), axis=axis, keepdims=keepdims))


def take(a, idx):
    def vjp(g, v, o):
        z = np.zeros_like(v[0])
        np.add.at(z, idx, g)
        return (z,)
    return _apply(lambda x: x[idx], vjp, a)


def concat(parts: Sequence[Any], axis: int = -1):
    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, v, o):
        sizes = [np.shape(x)[axis] for x in v]
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))
    return _apply(fwd, vjp, *parts)


def stack(parts: Sequence[Any], axis: int = -1):
    return concat([expand_dims(p, axis) for p in parts], axis=axis)


def expand_dims(a, axis):
    return _apply(lambda x: np.expand_dims(x, axis),
                  lambda g, v, o: (np.reshape(g, np.shape(v[0])),), a)


def segment_sum(a, segments, n: int):
    """Sum rows of ``a`` into ``n`` buckets given by integer ``segments``."""
    segments = np.asarray(segments)

    def fwd(x):
        out = np.zeros((n,) + np.shape(x)[1:])
        np.add.at(out, segments, x)
        return out
    return _apply(fwd, lambda g, v, o: (g[segments],), a)
