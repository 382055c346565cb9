"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records a fixed set of primitives.  Every primitive stores the
ids of its inputs and a pullback that maps the output cotangent to input
cotangents.  Cotangents are accumulated in float64 regardless of the forward
dtype.

    tape = Tape()
    x = tape.var(np.array(3.0))
    y = x * x
    grads = backward(tape, y)   # {x: array(6.)}
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .validation import ContractError, EvaluationError


class _Node(NamedTuple):
    op: str
    inputs: tuple
    pullback: Callable | None


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Var] = []

    def var(self, value, dtype=None) -> "Var":
        """Register a differentiable leaf."""
        v = self._push("leaf", np.asarray(value, dtype=dtype), (), None)
        self.leaves.append(v)
        return v

    def const(self, value, dtype=None) -> "Var":
        """Register a non-differentiable input."""
        return self._push("const", np.asarray(value, dtype=dtype), (), None)

    def _push(self, op, value, inputs, pullback) -> "Var":
        self.nodes.append(_Node(op, tuple(v.id for v in inputs), pullback))
        return Var(self, len(self.nodes) - 1, value)

    def __len__(self):
        return len(self.nodes)


class Var:
    """A value on a tape.  Shape is fixed at creation."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape: Tape, id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self):
        if self.value.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None):
        return vsum(self, axis)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise ContractError("primitive needs at least one Var input")


def _lift(tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ContractError("Vars from different tapes cannot be combined")
        return x
    return tape.const(np.asarray(x, dtype=np.float64))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t._push("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t._push("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    return t._push("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape),
                              _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    out = av / bv

    def pullback(g):
        ga = g / bv
        return (_unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape))

    return t._push("div", out, (a, b), pullback)


def power(a: Var, p: float) -> Var:
    """Elementwise ``a ** p`` for a constant exponent."""
    av = a.value
    p = float(p)
    if p == 0.0:
        return a.tape._push("pow", np.ones_like(av), (a,),
                            lambda g: (np.zeros_like(g),))
    return a.tape._push("pow", av ** p, (a,),
                        lambda g: (g * p * av ** (p - 1.0),))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._push("exp", out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape._push("log", np.log(av), (a,), lambda g: (g / av,))


def sigmoid(a: Var) -> Var:
    av = a.value
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(av))
    out = np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(av.dtype, copy=False)
    return a.tape._push("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Var) -> Var:
    """``max(a, 0)``: the elementwise form of the max-select primitive."""
    av = a.value
    keep = av > 0
    return a.tape._push("relu", np.maximum(av, 0, dtype=av.dtype),
                        (a,), lambda g: (g * keep,))


def clip(a: Var, lo: float, hi: float) -> Var:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return a.tape._push("clip", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions -----------------------------------------------------------------

def vsum(a: Var, axis=None) -> Var:
    av = a.value
    shape = av.shape
    out = np.sum(av, axis=axis)

    def pullback(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push("sum", np.asarray(out), (a,), pullback)


def vmax(a: Var, axis=-1, where=None) -> Var:
    """Max-select along ``axis``; the cotangent goes to the first maximiser.

    ``where`` masks out entries; every slice must keep at least one entry.
    """
    av = a.value
    masked = av if where is None else np.where(where, av, -np.inf)
    arg = np.argmax(masked, axis=axis)
    out = np.take_along_axis(masked, np.expand_dims(arg, axis), axis)
    if not np.all(np.isfinite(out)):
        raise ContractError("max over an empty selection")

    def pullback(g):
        z = np.zeros(av.shape, dtype=np.float64)
        np.put_along_axis(z, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (z,)

    return a.tape._push("max", np.squeeze(out, axis), (a,), pullback)


# -- structural -----------------------------------------------------------------

def reshape(a: Var, shape) -> Var:
    s = a.shape
    return a.tape._push("reshape", a.value.reshape(shape), (a,),
                        lambda g: (g.reshape(s),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return a.tape._push("transpose", a.value.transpose(axes), (a,),
                        lambda g: (g.transpose(inv),))


def concat(vars, axis=0) -> Var:
    t = _tape_of(*vars)
    vars = [_lift(t, v) for v in vars]
    sizes = np.cumsum([v.shape[axis] for v in vars])[:-1]
    out = np.concatenate([v.value for v in vars], axis=axis)
    return t._push("concat", out, vars,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def upsample2(a: Var) -> Var:
    """Nearest-neighbour 2x upsampling of an (N, H, W, C) array."""
    av = a.value
    out = av.repeat(2, axis=1).repeat(2, axis=2)

    def pullback(g):
        n, h, w, c = g.shape
        return (g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)

    return a.tape._push("upsample", out, (a,), pullback)


def sample(src: Var, index, weights) -> Var:
    """Weighted gather with fixed coordinates.

    ``out[...] = sum_k weights[..., k] * src.flat[index[..., k]]``.  With the
    four bilinear corner indices and weights this is bilinear sampling; with
    one index and weight 1 it is a plain gather.  Coordinates are constants,
    so gradients reach only the sampled values.
    """
    sv = src.value
    index = np.asarray(index, dtype=np.intp)
    weights = np.asarray(weights)
    if index.shape != weights.shape:
        raise ContractError("index and weights must have the same shape")
    flat = sv.reshape(-1)
    out = (flat[index] * weights).sum(axis=-1)
    shape, n = sv.shape, sv.size

    def pullback(g):
        contrib = (np.asarray(g, dtype=np.float64)[..., None] * weights).ravel()
        return (np.bincount(index.ravel(), weights=contrib, minlength=n).reshape(shape),)

    return src.tape._push("sample", out, (src,), pullback)


def conv2d(x: Var, w: Var, b: Var | None = None, stride: int = 1, pad: int = 1) -> Var:
    """2-D cross-correlation of channels-last (N, H, W, Cin) input with
    (Cout, Cin, kh, kw) kernels, zero padding ``pad`` and step ``stride``.

    Local products run in the input dtype; the tape accumulates in float64.
    """
    xv, wv = x.value, w.value
    n, h, wd, cin = xv.shape
    cout, cin2, kh, kw = wv.shape
    if cin != cin2:
        raise ContractError(f"conv2d channel mismatch: {cin} vs {cin2}")
    dt = xv.dtype
    xp = np.pad(xv, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    # one small matmul per kernel tap, accumulated over shifted views
    wt = np.ascontiguousarray(wv.transpose(2, 3, 1, 0), dtype=dt)  # (kh, kw, cin, cout)
    wtt = np.ascontiguousarray(wt.transpose(0, 1, 3, 2))

    def window(arr, i, j):
        return arr[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]

    out = np.zeros((n, ho, wo, cout), dtype=dt)
    for i in range(kh):
        for j in range(kw):
            out += window(xp, i, j) @ wt[i, j]
    inputs = [x, w]
    if b is not None:
        out += b.value.astype(dt, copy=False)
        inputs.append(b)

    def pullback(g):
        g = np.asarray(g, dtype=dt)
        gm = g.reshape(-1, cout)
        gw = np.empty((kh, kw, cin, cout), dtype=np.float64)
        gxp = np.zeros(xp.shape, dtype=dt)
        for i in range(kh):
            for j in range(kw):
                gw[i, j] = window(xp, i, j).reshape(-1, cin).T @ gm
                window(gxp, i, j)[...] += g @ wtt[i, j]
        gw = gw.transpose(3, 2, 0, 1)
        gx = gxp[:, pad:pad + h, pad:pad + wd, :]
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return x.tape._push("conv2d", out, inputs, pullback)


# -- driver ---------------------------------------------------------------------

def backward(tape: Tape, root: Var) -> dict:
    """Gradients of scalar ``root`` with respect to every leaf of ``tape``.

    Leaves that ``root`` does not depend on get zero gradients.
    """
    if root.tape is not tape:
        raise ContractError("root does not belong to this tape")
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: list = [None] * (root.id + 1)
    grads[root.id] = np.ones(root.shape, dtype=np.float64)
    nodes = tape.nodes
    for i in range(root.id, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.pullback is None:
            continue
        for j, gj in zip(node.inputs, node.pullback(g)):
            if nodes[j].op == "const":
                continue
            gj = np.asarray(gj, dtype=np.float64)
            grads[j] = gj if grads[j] is None else grads[j] + gj
    out = {}
    for leaf in tape.leaves:
        g = grads[leaf.id] if leaf.id <= root.id else None
        out[leaf] = np.zeros(leaf.shape) if g is None else g.reshape(leaf.shape)
    return out


def grad(f, x) -> tuple[float, np.ndarray]:
    """Value and gradient of ``f`` (a function of one Var returning a scalar Var) at ``x``."""
    tape = Tape()
    v = tape.var(np.asarray(x, dtype=np.float64))
    y = f(v)
    if not isinstance(y, Var):
        return float(y), np.zeros(v.shape)
    return y.item(), backward(tape, y)[v]


def _evaluate(f, x):
    tape = Tape()
    y = f(tape.var(x))
    val = y.item() if isinstance(y, Var) else float(y)
    if not np.isfinite(val):
        raise EvaluationError("function value is not finite")
    return val


def gradcheck(f, x, eps: float = 1e-5, coords=None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    _evaluate(f, x)
    _, analytic = grad(f, x)
    analytic = analytic.reshape(-1)
    idx = range(x.size) if coords is None else coords
    flat = x.reshape(-1)
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = _evaluate(f, x)
        flat[i] = old - eps
        fm = _evaluate(f, x)
        flat[i] = old
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
