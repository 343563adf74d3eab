"""Dense tensors with a reverse-mode tape, plus Adam and a finite-difference oracle.

Every op is vectorized over numpy arrays. A :class:`Tape` records nodes in
creation order, which is already a valid topological order, so the backward
pass is a single reverse sweep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64


def resolve_dtype(precision):
    if precision in ("f64", "float64", np.float64, None):
        return np.float64
    if precision in ("f32", "float32", np.float32):
        return np.float32
    raise ConfigError(f"unknown precision {precision!r}; expected f32 or f64")


class Tape:
    """Ordered record of recorded nodes and a name -> parameter registry."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def param(self, name, value):
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.asarray(value), tape=self)
        t.name = name
        self.nodes.append(t)
        self.params[name] = t
        return t

    def clear(self):
        """Drop recorded nodes, breaking the tape <-> tensor reference cycle."""
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes.clear()
        self.params.clear()

    def watch(self, params):
        """Register a whole dict of arrays and return the matching Tensors."""
        return {k: self.param(k, v) for k, v in params.items()}


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "tape", "name", "op")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, tape=None, op=""):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.name = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self):
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

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

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(value, parents, vjp, op):
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(value, op=op)
    t = Tensor(value, parents, vjp, tape, op)
    tape.nodes.append(t)
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise binary -----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)),
                 "div")


def neg(a):
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {av.shape} @ {bv.shape}")
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


# --- elementwise unary ------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    # log(1 + e^x) with e^x capped at e^30, where softplus(x) = x to working precision;
    # np.logaddexp is several times slower and softplus is the hot loop of training
    a = as_tensor(a)
    av = a.value
    e = np.exp(np.minimum(av, 30.0))
    onep = e + 1.0
    out = np.log(onep)
    big = av > 30.0
    if big.any():
        out = np.where(big, av, out)
    return _node(out, (a,), lambda g: (g * e / onep,), "softplus")


def square(a):
    a = as_tensor(a)
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,), "square")


def absolute(a):
    a = as_tensor(a)
    av = a.value
    return _node(np.abs(av), (a,), lambda g: (g * np.sign(av),), "abs")


def clip(a, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,), "clip")


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=axis))

    def vjp(g):
        o = np.expand_dims(out, axis)
        safe = np.where(o > 0, o, 1.0)
        return (np.expand_dims(g, axis) * np.where(o > 0, av / safe, 0.0),)

    return _node(out, (a,), vjp, "norm")


# --- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis):
    """Max reduction; ties send the gradient to the first maximizer."""
    a = as_tensor(a)
    av = a.value
    idx = np.argmax(av, axis=axis)

    def vjp(g):
        out = np.zeros_like(av)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _node(np.max(av, axis=axis), (a,), vjp, "max")


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)


def getitem(a, idx):
    a = as_tensor(a)
    av = a.value
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros_like(av)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _node(av[idx], (a,), vjp, "getitem")


def take_rows(a, rows):
    """Gather rows ``a[rows]`` for an integer index array (repeats allowed)."""
    a = as_tensor(a)
    av = a.value
    rows = np.asarray(rows)

    def vjp(g):
        if av.ndim == 2 and av.shape[0] <= 256:
            # few source rows (one per frame): a scatter matrix beats np.add.at
            onehot = np.zeros((av.shape[0], rows.size), g.dtype)
            onehot[rows, np.arange(rows.size)] = 1.0
            return (onehot @ g,)
        out = np.zeros_like(av)
        np.add.at(out, rows, g)
        return (out,)

    return _node(av[rows], (a,), vjp, "take")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.value for t in ts], axis=axis), tuple(ts), vjp, "concat")


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(np.stack([t.value for t in ts], axis=axis), tuple(ts), vjp, "stack")


def where(mask, a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask)
    sa, sb = a.shape, b.shape
    return _node(np.where(mask, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa),
                            _unbroadcast(np.where(mask, 0.0, g), sb)),
                 "where")


# --- backward ---------------------------------------------------------------

def backward(tape, loss):
    """Reverse sweep; returns d(loss)/d(param) for every registered parameter."""
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise ContractError("backward needs a scalar loss tensor")
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if p.tape is not tape or pg is None:
                continue
            p.grad = pg if p.grad is None else p.grad + pg
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in tape.params.items()}


def finite_difference_grad(f, x, h=1e-5):
    """Central differences of a scalar function ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at component {i}")
        gf[i] = (fp - fm) / (2.0 * h)
    return g


# --- parameters and optimizer ----------------------------------------------

def init_linear(rng, fan_in, fan_out, zero=False, dtype=DEFAULT_DTYPE):
    if zero:
        return np.zeros((fan_in, fan_out), dtype), np.zeros(fan_out, dtype)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype), np.zeros(fan_out, dtype)


def init_mlp(rng, prefix, sizes, zero_last=False, dtype=DEFAULT_DTYPE):
    params = {}
    n = len(sizes) - 1
    for k in range(n):
        W, b = init_linear(rng, sizes[k], sizes[k + 1], zero=zero_last and k == n - 1, dtype=dtype)
        params[f"{prefix}.l{k}.W"] = W
        params[f"{prefix}.l{k}.b"] = b
    return params


def mlp_depth(P, prefix):
    k = 0
    while f"{prefix}.l{k}.W" in P:
        k += 1
    return k


def apply_mlp(P, prefix, x, start=0, first_bias=None):
    """Softplus MLP with a linear output layer.

    ``first_bias`` (already including layer ``start``'s bias) replaces the bias
    of the first applied layer; callers use it to fold in a per-row
    conditioning term computed once per code rather than once per point.
    """
    n = mlp_depth(P, prefix)
    h = x
    for k in range(start, n):
        h = matmul(h, P[f"{prefix}.l{k}.W"])
        h = add(h, first_bias if (k == start and first_bias is not None) else P[f"{prefix}.l{k}.b"])
        if k < n - 1:
            h = softplus(h)
    return h


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam, updating ``params`` in place. Returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
