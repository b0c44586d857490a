"""Differentiable primitives.

Each primitive computes its output with numpy and, when a tape is active
and an input is tracked, records a vector-Jacobian closure.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import NonFiniteError, ShapeError, Tensor, active_tape, as_tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _emit(data, inputs, vjp):
    if not np.isfinite(data).all():
        raise NonFiniteError("primitive produced non-finite output")
    out = Tensor(data, check=False)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform") from None


# elementwise binary --------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# elementwise unary ---------------------------------------------------------

def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = out.astype(a.data.dtype, copy=False)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


def square(a):
    a = as_tensor(a)
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def elu(a):
    """ELU with alpha = 1."""
    a = as_tensor(a)
    x = a.data
    neg_part = np.exp(np.minimum(x, 0))
    out = np.where(x > 0, x, neg_part - 1.0).astype(x.dtype)
    return _emit(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part),))


def elu1p(a):
    """ELU(1, x) + 1: x + 1 for x >= 0, exp(x) otherwise; strictly positive."""
    a = as_tensor(a)
    x = a.data
    e = np.exp(np.minimum(x, 0))
    out = np.where(x >= 0, x + 1.0, e).astype(x.dtype)
    return _emit(out, (a,), lambda g: (g * np.where(x >= 0, 1.0, e),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    sig = 0.5 * (np.tanh(0.5 * x) + 1.0)
    return _emit(out, (a,), lambda g: (g * sig,))


# reductions and normalizers -----------------------------------------------

def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(out, dtype=a.data.dtype), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log_sum_exp(a, axis=-1):
    """Overflow-safe log(sum(exp(a))) along ``axis`` (subtract-max form)."""
    a = as_tensor(a)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    w = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return _emit(out.astype(x.dtype), (a,), vjp)


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _emit(out, (a,), vjp)


# structural ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _emit(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=ax)))


def index(a, key):
    """Numpy-style indexing; gradient scatters back with accumulation."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return _emit(np.array(a.data[key]), (a,), vjp)


def where(mask, a, b):
    """Select ``a`` where mask else ``b``; mask is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return _emit(
        out, (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape)),
    )


# fused losses -------------------------------------------------------------

def bce_with_logits(logits, target):
    """Elementwise Bernoulli cross-entropy of sigmoid(logits) against target."""
    z = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=z.data.dtype)
    if t.shape != z.shape:
        raise ShapeError(f"bce_with_logits: shapes {z.shape} and {t.shape} do not conform")
    x = z.data
    out = (np.logaddexp(0, x) - t * x).astype(x.dtype)
    sig = 0.5 * (np.tanh(0.5 * x) + 1.0)
    return _emit(out, (z,), lambda g: (g * (sig - t),))


# convolutions (NCHW, valid padding) ----------------------------------------

def _windows(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return as_strided(x, (n, c, kh, kw, oh, ow), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def _im2col(x, kh, kw, stride):
    win = _windows(np.ascontiguousarray(x), kh, kw, stride)
    n, c, _, _, oh, ow = win.shape
    return win.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, shape, kh, kw, stride, oh, ow):
    n, c, h, w = shape
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return out


def _batched_outer(a, b):
    # sum_n a[n] @ b[n].T as one GEMM: (N, A, P), (N, B, P) -> (A, B)
    n, na, p = a.shape
    nb = b.shape[1]
    a2 = a.transpose(1, 0, 2).reshape(na, n * p)
    b2 = b.transpose(1, 0, 2).reshape(nb, n * p)
    return a2 @ b2.T


def conv2d(x, w, stride=1):
    """x: (N, C, H, W); w: (O, C, kh, kw); valid padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    o, c, kh, kw = w.shape
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    cols, oh, ow = _im2col(x.data, kh, kw, stride)
    wm = w.data.reshape(o, -1)
    out = (wm @ cols).reshape(x.shape[0], o, oh, ow)
    xshape = x.shape

    def vjp(g):
        gm = g.reshape(g.shape[0], o, oh * ow)
        gw = _batched_outer(gm, cols).reshape(w.shape)
        gx = _col2im(wm.T @ gm, xshape, kh, kw, stride, oh, ow)
        return gx, gw

    return _emit(out, (x, w), vjp)


def conv_transpose2d(x, w, stride=1):
    """Adjoint of conv2d. x: (N, Cin, H, W); w: (Cin, Cout, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: shapes {x.shape} and {w.shape} do not conform")
    cin, cout, kh, kw = w.shape
    n, _, h, wd = x.shape
    oh, ow = (h - 1) * stride + kh, (wd - 1) * stride + kw
    wm = w.data.reshape(cin, -1)
    xm = x.data.reshape(n, cin, h * wd)
    cols = wm.T @ xm
    out = _col2im(cols, (n, cout, oh, ow), kh, kw, stride, h, wd)

    def vjp(g):
        gcols, _, _ = _im2col(g, kh, kw, stride)
        gx = (wm @ gcols).reshape(x.shape)
        gw = _batched_outer(xm, gcols).reshape(w.shape)
        return gx, gw

    return _emit(out, (x, w), vjp)
