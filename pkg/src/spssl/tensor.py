"""Minimal dense-tensor engine with reverse-mode autodiff.

Exactly the operations the segmentation nets and losses need, nothing more:
conv / transposed conv, linear, group norm, dropout, softmax over channels,
and a handful of elementwise + reduction primitives. Values live in
contiguous numpy arrays (float32 by default, float64 supported everywhere
and used by the gradient-check tests). The graph is the implicit DAG of
parent references; `backward` replays it once in reverse topological order.
"""

from contextlib import contextmanager

import numpy as np

from .backend import kernels as K
from .errors import ConfigError, NumericError, ShapeError, StateError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording; forward values are bit-identical either way."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Ctx:
    __slots__ = ("parents", "bwd")

    def __init__(self, parents, bwd):
        self.parents = parents
        self.bwd = bwd


class Tensor:
    """Dense n-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "_backward_ran")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def detach(self):
        out = Tensor(self.data, requires_grad=False)
        return out

    def copy(self, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _result(data, parents, bwd):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = _Ctx(tuple(parents), bwd)
    return out


def _check_same(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _check_finite(t, op):
    if not np.isfinite(t.data).all():
        raise NumericError(f"{op}: non-finite values in input")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    _check_same(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def scalar_mul(a, c):
    c = float(c)
    return _result(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * np.asarray(c, dtype=a.dtype),))


def scalar_add(a, c):
    c = float(c)
    return _result(a.data + np.asarray(c, dtype=a.dtype), (a,), lambda g: (g,))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a):
    # stable two-sided form
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions

def sum_all(a):
    out = a.data.sum(dtype=a.dtype)
    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)
    return _result(np.asarray(out), (a,), bwd)


def mean_all(a):
    return scalar_mul(sum_all(a), 1.0 / a.size)


def sum_per_sample(a):
    """Sum over all axes except the leading (batch) axis -> shape [B]."""
    axes = tuple(range(1, a.data.ndim))
    out = a.data.sum(axis=axes, dtype=a.dtype)
    def bwd(g):
        expand = g.reshape((-1,) + (1,) * (a.data.ndim - 1))
        return (np.broadcast_to(expand, a.data.shape).astype(a.dtype, copy=False),)
    return _result(out, (a,), bwd)


# ---------------------------------------------------------------- structural

def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= axis < a.data.ndim):
        raise ShapeError(f"narrow: bad axis {axis} for ndim {a.data.ndim}")
    if start < 0 or length < 1 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}:{start + length}) outside axis of size {a.data.shape[axis]}")
    idx = tuple(slice(None) for _ in range(axis)) + (slice(start, start + length),)
    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)
    return _result(np.ascontiguousarray(a.data[idx]), (a,), bwd)


# ---------------------------------------------------------------- activations

def softmax_channel(a):
    """Softmax over axis 1 (channels); output channel-sums to 1 per voxel."""
    x = a.data
    if x.ndim < 2:
        raise ShapeError("softmax_channel: need a channel axis")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=1, keepdims=True)
    def bwd(g):
        dot = (p * g).sum(axis=1, keepdims=True)
        return (p * (g - dot),)
    return _result(p, (a,), bwd)


def log_softmax_channel(a):
    x = a.data
    if x.ndim < 2:
        raise ShapeError("log_softmax_channel: need a channel axis")
    m = x.max(axis=1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
    out = s - lse
    def bwd(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)
    return _result(out, (a,), bwd)


def dropout(a, p, rng, active):
    """Inverted dropout; identity when inactive or p == 0.

    Train / MC-dropout modes pass active=True with an explicit generator so
    the mask stream is owned by the caller and reproducible.
    """
    if not (0.0 <= p < 1.0):
        raise ConfigError(f"dropout: p must be in [0, 1), got {p}")
    if not active or p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p)
    scale = a.dtype.type(1.0 / (1.0 - p))
    mask = keep.astype(a.dtype) * scale
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- layers

def conv2d(x, w, b, stride=1, padding=0):
    """2d cross-correlation, weight [Cout, Cin, k, k], bias [Cout]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError("conv2d: expected x[B,Ci,H,W], w[Co,Ci,k,k], b[Co]")
    bs, ci, h, wd = x.shape
    co, ci_w, k, k2 = w.shape
    if k != k2 or k < 1:
        raise ShapeError(f"conv2d: kernel must be square and k >= 1, got {w.shape}")
    if ci != ci_w or b.shape[0] != co:
        raise ShapeError(f"conv2d: channel mismatch x={x.shape} w={w.shape} b={b.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h}x{wd}+2*{padding}")
    if x.data.dtype != w.data.dtype or x.data.dtype != b.data.dtype:
        raise ShapeError("conv2d: mixed dtypes")
    _check_finite(x, "conv2d")
    out = K.conv2d_forward(x.data, w.data, b.data, stride, padding)
    def bwd(g):
        return K.conv2d_backward(g, x.data, w.data, stride, padding)
    return _result(out, (x, w, b), bwd)


def transposed_conv2d(x, w, b, stride):
    """Transposed conv, weight [Cin, Cout, k, k]; output (H-1)*stride + k."""
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError("transposed_conv2d: expected x[B,Ci,H,W], w[Ci,Co,k,k], b[Co]")
    if stride not in (1, 2):
        raise ShapeError(f"transposed_conv2d: stride must be 1 or 2, got {stride}")
    bs, ci, h, wd = x.shape
    ci_w, co, k, k2 = w.shape
    if k != k2 or ci != ci_w or b.shape[0] != co:
        raise ShapeError(f"transposed_conv2d: shape mismatch x={x.shape} w={w.shape} b={b.shape}")
    if x.data.dtype != w.data.dtype or x.data.dtype != b.data.dtype:
        raise ShapeError("transposed_conv2d: mixed dtypes")
    _check_finite(x, "transposed_conv2d")
    out = K.tconv2d_forward(x.data, w.data, b.data, stride)
    def bwd(g):
        return K.tconv2d_backward(g, x.data, w.data, stride)
    return _result(out, (x, w, b), bwd)


def linear(x, w, b):
    """Dense layer: x[B,F] @ w[O,F].T + b[O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("linear: expected x[B,F], w[O,F], b[O]")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"linear: shape mismatch x={x.shape} w={w.shape} b={b.shape}")
    out = x.data @ w.data.T + b.data
    def bwd(g):
        return (g @ w.data, g.T @ x.data, g.sum(axis=0))
    return _result(out, (x, w, b), bwd)


def group_norm(x, gamma, beta, groups, eps=1e-5):
    """Group normalization over [C/groups, H, W] slabs, per-channel affine."""
    if x.data.ndim != 4:
        raise ShapeError("group_norm: expected x[B,C,H,W]")
    bs, c, h, wd = x.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm: affine params must have shape [C]")
    n = (c // groups) * h * wd
    xg = x.data.reshape(bs, groups, n)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = ((xg - mu) * inv).reshape(bs, c, h, wd)
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxh = (g * gamma.data[None, :, None, None]).reshape(bs, groups, n)
        xh = xhat.reshape(bs, groups, n)
        m1 = dxh.mean(axis=2, keepdims=True)
        m2 = (dxh * xh).mean(axis=2, keepdims=True)
        dx = (inv * (dxh - m1 - xh * m2)).reshape(x.data.shape)
        return (dx.astype(x.dtype, copy=False), dgamma, dbeta)
    return _result(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------- backward

def backward(loss):
    """Populate grads of every requires_grad tensor reachable from `loss`.

    `loss` must be scalar. Each graph node is visited exactly once, in
    reverse topological (execution-consistent) order. A second backward
    through the same loss raises StateError; build a fresh graph instead.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward_ran:
        raise StateError("backward: graph already consumed; recompute the loss (and zero_grad) first")
    if not np.isfinite(loss.data).all():
        raise NumericError("backward: loss is not finite")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or node._ctx is None:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._ctx.parents:
            if p._ctx is not None and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        parent_grads = node._ctx.bwd(g)
        for p, pg in zip(node._ctx.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype).reshape(p.data.shape)
            if p.grad is None:
                p.grad = pg
            else:
                p.grad = p.grad + pg
    loss._backward_ran = True


# ---------------------------------------------------------------- optimizer

def sgd_step(params, lr, momentum):
    """Classical momentum SGD: v <- m*v + grad; w <- w - lr*v.

    `params` is a ModelParams-like object exposing items() and a `momentum`
    buffer dict keyed by parameter name.
    """
    if lr < 0:
        raise ConfigError(f"sgd_step: lr must be >= 0, got {lr}")
    if not (0.0 <= momentum < 1.0):
        raise ConfigError(f"sgd_step: momentum must be in [0, 1), got {momentum}")
    for name, t in params.items():
        if t.grad is None:
            raise StateError(f"sgd_step: parameter {name!r} has no gradient; run backward first")
        buf = params.momentum.get(name)
        if buf is None:
            buf = np.zeros_like(t.data)
        buf = momentum * buf + t.grad
        params.momentum[name] = buf
        t.data -= np.asarray(lr, dtype=t.dtype) * buf


def zero_grad(params):
    for _, t in params.items():
        t.grad = None
