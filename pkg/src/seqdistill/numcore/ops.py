"""Differentiable primitive catalog over `Tensor`.

Every op computes its result with numpy, then (when a tape is active and an
input requires gradients) appends a record whose backward closure returns
``[(input, grad), ...]`` pairs. Backward closures only compute gradients for
inputs that can use them.
"""

import numpy as np
from scipy.special import erf, expit

from seqdistill import kernels
from seqdistill.errors import ContractViolation, NumericError
from seqdistill.numcore.tensor import (
    Tensor,
    active_tape,
    finite_checks_enabled,
)

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _trace(op, out_data, inputs, backward):
    if finite_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output produced by primitive {op!r}")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(
        isinstance(x, Tensor) and x.requires_grad for x in inputs
    ):
        out.requires_grad = True
        tape.add(op, out, backward, inputs)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _trace("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _trace("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.shape)))
        return out

    return _trace("mul", a.data * b.data, (a, b), backward)


def neg(a):
    a = _wrap(a)

    def backward(g):
        return [(a, -g)]

    return _trace("neg", -a.data, (a,), backward)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting (covers bias-free linear
    layers, attention score/value products, and batched variants)."""
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        out = []
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            out.append((a, _unbroadcast(ga, a.shape)))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            out.append((b, _unbroadcast(gb, b.shape)))
        return out

    return _trace("matmul", a.data @ b.data, (a, b), backward)


def dot(a, b):
    """Inner product of two 1-D tensors, returning a scalar."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ContractViolation("dot expects 1-D tensors")

    def backward(g):
        return [(a, g * b.data), (b, g * a.data)]

    return _trace("dot", a.data @ b.data, (a, b), backward)


def sq_dist(a, b):
    """Squared L2 distance along the last axis: sum((a-b)**2, axis=-1)."""
    a, b = _wrap(a), _wrap(b)
    diff = a.data - b.data

    def backward(g):
        gd = 2.0 * diff * g[..., None]
        return [(a, _unbroadcast(gd, a.shape)), (b, _unbroadcast(-gd, b.shape))]

    return _trace("sq_dist", (diff * diff).sum(axis=-1), (a, b), backward)


# -- activations ------------------------------------------------------------


def relu(x):
    x = _wrap(x)
    mask = x.data > 0

    def backward(g):
        return [(x, g * mask)]

    return _trace("relu", np.where(mask, x.data, 0.0), (x,), backward)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return [(x, g * (cdf + x.data * pdf))]

    return _trace("gelu", x.data * cdf, (x,), backward)


def sigmoid(x):
    x = _wrap(x)
    y = expit(x.data)

    def backward(g):
        return [(x, g * y * (1.0 - y))]

    return _trace("sigmoid", y, (x,), backward)


def softplus(x):
    """log(1 + exp(x)), computed stably."""
    x = _wrap(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def backward(g):
        return [(x, g * expit(x.data))]

    return _trace("softplus", out, (x,), backward)


def exp(x):
    x = _wrap(x)
    y = np.exp(x.data)

    def backward(g):
        return [(x, g * y)]

    return _trace("exp", y, (x,), backward)


def log(x):
    x = _wrap(x)

    def backward(g):
        return [(x, g / x.data)]

    return _trace("log", np.log(x.data), (x,), backward)


def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return [(x, (g - inner) * y)]

    return _trace("softmax", y, (x,), backward)


# -- reductions -------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = _wrap(x)

    def backward(g):
        return [(x, _expand_reduced(g, x.shape, axis, keepdims))]

    return _trace("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    scale = x.data.size / out.size

    def backward(g):
        return [(x, _expand_reduced(g, x.shape, axis, keepdims) / scale)]

    return _trace("mean", out, (x,), backward)


# -- normalization ----------------------------------------------------------


def layernorm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with learned gain and bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xmu = x.data - mu
    var = (xmu * xmu).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xmu * inv
    n = x.shape[-1]

    def backward(g):
        out = []
        if x.requires_grad:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            out.append((x, (inv / n) * (n * dxhat - s1 - xhat * s2)))
        if gain.requires_grad:
            lead = tuple(range(g.ndim - 1))
            out.append((gain, (g * xhat).sum(axis=lead)))
        if bias.requires_grad:
            lead = tuple(range(g.ndim - 1))
            out.append((bias, g.sum(axis=lead)))
        return out

    return _trace("layernorm", xhat * gain.data + bias.data, (x, gain, bias), backward)


def l2_normalize(x, eps=1e-12, axis=-1):
    """x / (||x|| + eps) along ``axis``; maps the zero vector to itself."""
    x = _wrap(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    s = 1.0 / (norm + eps)
    out = x.data * s

    def backward(g):
        safe = np.where(norm == 0.0, 1.0, norm)
        inner = (g * x.data).sum(axis=axis, keepdims=True)
        return [(x, g * s - x.data * inner * (s * s) / safe)]

    return _trace("l2_normalize", out, (x,), backward)


# -- structure --------------------------------------------------------------


def gather(table, ids):
    """Row lookup ``table[ids]`` for a 2-D table; ids are non-differentiable."""
    table = _wrap(table)
    if table.ndim != 2:
        raise ContractViolation("gather expects a 2-D table")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation("gather ids out of range")

    def backward(g):
        if not table.requires_grad:
            return []
        gt = np.zeros_like(table.data)
        d = table.shape[1]
        kernels.scatter_add_rows(
            gt, ids.reshape(-1), np.ascontiguousarray(g.reshape(-1, d))
        )
        return [(table, gt)]

    return _trace("gather", table.data[ids], (table,), backward)


def take_positions(x, idx):
    """Select one row per batch element: out[b] = x[b, idx[b]]."""
    x = _wrap(x)
    idx = np.asarray(idx)
    ar = np.arange(x.shape[0])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[ar, idx] = g
        return [(x, gx)]

    return _trace("take_positions", x.data[ar, idx], (x,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, offsets, axis=axis)
        return [(t, p) for t, p in zip(tensors, parts) if t.requires_grad]

    return _trace(
        "concat", np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors), backward,
    )


def reshape(x, shape):
    x = _wrap(x)

    def backward(g):
        return [(x, g.reshape(x.shape))]

    return _trace("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x, axes=None):
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        return [(x, g.transpose(inv))]

    return _trace("transpose", x.data.transpose(axes), (x,), backward)


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is True by ``value`` (mask is not
    differentiated; gradients at filled positions are zero)."""
    x = _wrap(x)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        return [(x, np.where(mask, 0.0, g))]

    return _trace("masked_fill", np.where(mask, value, x.data), (x,), backward)


def stop_gradient(x):
    x = _wrap(x)
    return Tensor(x.data)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return _wrap(x)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# operator sugar on Tensor
Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
