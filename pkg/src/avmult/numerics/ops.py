"""Differentiable primitives.

Elementwise ops broadcast the way numpy does; adjoints are summed back over
the broadcast axes by ``_unbroadcast``.  Shapes are only ever expanded along
leading axes or size-1 axes (bias rows, per-frame masks).
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    a = _lift(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_node(ad * bd, (a, b), backward, "mul")


def div(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_node(out, (a, b), backward, "div")


def neg(a):
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a):
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def abs(a):  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return make_node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a):
    ad = a.data
    keep = ad > 0
    return make_node(np.where(keep, ad, 0).astype(ad.dtype), (a,), lambda g: (g * keep,), "relu")


def tanh(a):
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- reductions and shape manipulation ---------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(out, dtype=a.data.dtype), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    shape, dtype = a.shape, a.data.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def pad_time(a, before, after):
    """Zero-pad axis -2 (time)."""
    pad = [(0, 0)] * a.ndim
    pad[-2] = (before, after)
    t = a.shape[-2]

    def backward(g):
        return (g[..., before:before + t, :],)

    return make_node(np.pad(a.data, pad), (a,), backward, "pad_time")


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true by a constant; masked entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data)
    return make_node(out, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype),), "masked_fill")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as [in, out]."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = add(out, bias)
    if x.ndim != 2:
        out = out.reshape(lead + (weight.shape[-1],))
    return out


# -- normalizations -----------------------------------------------------------

def softmax(x, axis=-1):
    """Max-subtracted softmax.  NaN inputs propagate to NaN outputs."""
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    d = xd.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return make_node(out.astype(xd.dtype, copy=False), (x, gain, bias), backward, "layernorm")


# -- temporal convolution ----------------------------------------------------

def conv1d_temporal(x, kernel, bias=None):
    """Same-padded convolution over time.

    ``x`` is [..., T, Din] and ``kernel`` is [k, Din, Dout] with odd k; output
    is [..., T, Dout] with ``out[t] = sum_j x[t + j - k//2] @ kernel[j]``.
    """
    x = as_tensor(x)
    k, din, dout = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"temporal conv kernel size must be odd, got {k}")
    if x.shape[-1] != din:
        raise ShapeError(f"conv input feature dim {x.shape} does not match kernel {kernel.shape}")
    half = k // 2
    if k == 1:
        out = linear(x, kernel.reshape((din, dout)), bias)
        return out
    t = x.shape[-2]
    xp = pad_time(x, half, half)
    cols = concat([xp[..., j:j + t, :] for j in range(k)], axis=-1)
    return linear(cols, kernel.reshape((k * din, dout)), bias)


# -- stochastic regularization ------------------------------------------------

def dropout(x, p, rng, train=True):
    """Inverted dropout: surviving units are scaled by 1/(1-p) at train time."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- losses -------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N, C]."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return neg(mean(picked))
