"""Dense-tensor numerics with reverse-mode automatic differentiation.

Every learnable operation in the package is built from the primitives in
this module.  Design points:

* numpy arrays are the storage; float32 is the training dtype and float64
  is available (``use_dtype``) for finite-difference gradient checking.
* A single global tape records differentiable ops in execution order;
  ``backward`` walks it in exact reverse order, accumulates gradients
  additively into every reachable ``requires_grad`` tensor, then clears
  the tape.  Callers zero gradients between optimizer steps.
* Convolution is cross-correlation (no kernel flip); bilinear resizing
  uses the align-corners=false convention.  Both are pinned so golden
  values stay stable.
"""

import math
from contextlib import contextmanager

import numpy as np

from .errors import NumericsError, ShapeError, UsageError

_DEFAULT_DTYPE = np.float32
_NAN_CHECKS = False


def set_default_dtype(dtype):
    """Set the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (used by the gradcheck suite)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def set_debug_nan_checks(enabled):
    """Verify op outputs are finite after every forward op (slow)."""
    global _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)


def _finite_check(data, op):
    if _NAN_CHECKS and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by {op}")


class _Record:
    """One executed differentiable op: its output and gradient callback."""

    __slots__ = ("out", "fn")

    def __init__(self, out, fn):
        self.out = out
        self.fn = fn


class GradTape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.records = []
        self.enabled = True


_TAPE = GradTape()


@contextmanager
def no_grad():
    """Disable taping; ops run forward-only and outputs never require grad."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def grad_enabled():
    return _TAPE.enabled


class Tensor:
    """A dense float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and data.dtype.type in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        """A view of the same data outside the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the functional forms below do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _emit(data, inputs, make_backward, op):
    """Wrap op output; record its backward closure when grads are live."""
    _finite_check(data, op)
    track = _TAPE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        _TAPE.records.append(_Record(out, make_backward(out)))
    return out


def backward(loss):
    """Accumulate d(loss)/d(x) into every reachable requires_grad tensor.

    `loss` must be a scalar produced under the active tape.  The tape is
    cleared afterwards; calling backward twice on the same graph raises.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise UsageError("backward requires a scalar loss tensor")
    records = _TAPE.records
    idx = None
    for i in range(len(records) - 1, -1, -1):
        if records[i].out is loss:
            idx = i
            break
    if idx is None:
        raise UsageError(
            "loss was not produced under the active tape "
            "(backward already consumed it, or it was computed under no_grad)"
        )
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for rec in reversed(records[: idx + 1]):
        if rec.out.grad is not None:
            rec.fn(rec.out.grad)
    records.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def make(out):
        def fn(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.data.shape))

        return fn

    return _emit(data, (a, b), make, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def make(out):
        def fn(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g, b.data.shape))

        return fn

    return _emit(data, (a, b), make, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def make(out):
        def fn(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

        return fn

    return _emit(data, (a, b), make, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def make(out):
        def fn(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return fn

    return _emit(data, (a, b), make, "div")


def matmul(a, b):
    """Matrix product with batch broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def make(out):
        def fn(g):
            if a.requires_grad:
                ga = np.matmul(g, b.data.swapaxes(-1, -2))
                _accumulate(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
                _accumulate(b, _unbroadcast(gb, b.data.shape))

        return fn

    return _emit(data, (a, b), make, "matmul")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def make(out):
        def fn(g):
            if x.requires_grad:
                _accumulate(x, g * (x.data > 0))

        return fn

    return _emit(data, (x,), make, "relu")


def sigmoid(x):
    x = as_tensor(x)
    # evaluate on the negative half-line only, so exp never overflows
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    data = data.astype(d.dtype, copy=False)

    def make(out):
        y = data

        def fn(g):
            if x.requires_grad:
                _accumulate(x, g * y * (1.0 - y))

        return fn

    return _emit(data, (x,), make, "sigmoid")


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def make(out):
        def fn(g):
            if x.requires_grad:
                _accumulate(x, g * data)

        return fn

    return _emit(data, (x,), make, "exp")


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def make(out):
        def fn(g):
            if x.requires_grad:
                _accumulate(x, g / x.data)

        return fn

    return _emit(data, (x,), make, "log")


def clamp(x, lo, hi):
    """Clip to [lo, hi]; gradient passes through wherever lo <= x <= hi."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)

    def make(out):
        mask = (x.data >= lo) & (x.data <= hi)

        def fn(g):
            if x.requires_grad:
                _accumulate(x, g * mask)

        return fn

    return _emit(data, (x,), make, "clamp")


def softmax(x, axis=-1):
    """Numerically stable softmax; slices along `axis` sum to 1."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def make(out):
        y = data

        def fn(g):
            if x.requires_grad:
                dot = (g * y).sum(axis=axis, keepdims=True)
                _accumulate(x, y * (g - dot))

        return fn

    return _emit(data, (x,), make, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tensor_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def make(out):
        def fn(g):
            if not x.requires_grad:
                return
            if axis is None:
                _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _accumulate(x, np.broadcast_to(gg, x.data.shape).copy())

        return fn

    return _emit(np.asarray(data), (x,), make, "sum")


def tensor_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def make(out):
        def fn(g):
            if x.requires_grad:
                _accumulate(x, g.reshape(x.data.shape))

        return fn

    return _emit(data, (x,), make, "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    data = x.data.transpose(axes)

    def make(out):
        inverse = tuple(np.argsort(axes))

        def fn(g):
            if x.requires_grad:
                _accumulate(x, g.transpose(inverse))

        return fn

    return _emit(data, (x,), make, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def make(out):
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def fn(g):
            for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, stop)
                    _accumulate(t, g[tuple(sl)])

        return fn

    return _emit(data, tensors, make, "concat")


def slice_axis(x, axis, start, stop):
    """Contiguous slice along one axis (the inverse of concat)."""
    x = as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = x.data[sl]

    def make(out):
        def fn(g):
            if x.requires_grad:
                buf = np.zeros_like(x.data)
                buf[sl] = g
                _accumulate(x, buf)

        return fn

    return _emit(data, (x,), make, "slice")


def broadcast_to(x, shape):
    x = as_tensor(x)
    data = np.broadcast_to(x.data, shape).copy()

    def make(out):
        def fn(g):
            if x.requires_grad:
                _accumulate(x, _unbroadcast(g, x.data.shape))

        return fn

    return _emit(data, (x,), make, "broadcast_to")


def embedding_lookup(table, ids):
    """Gather rows of a (V, d) table by an integer index array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    data = table.data[ids]

    def make(out):
        def fn(g):
            if table.requires_grad:
                buf = np.zeros_like(table.data)
                np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
                _accumulate(table, buf)

        return fn

    return _emit(data, (table,), make, "embedding")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, bias=None, stride=1, pad=0):
    """Cross-correlation of x:(B,C,H,W) with w:(K,C,k,k).

    Output spatial size is floor((H + 2*pad - k)/stride) + 1 per axis.
    Implemented as im2col + GEMM; the patch matrix is kept for backward.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.data.shape} and {w.data.shape}")
    B, C, H, W = x.data.shape
    K, Cw, kh, kw = w.data.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs weight {w.data.shape}")
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {w.data.shape}")
    k = kh
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeError(f"kernel {k}x{k} larger than padded input {(H + 2 * pad, W + 2 * pad)}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # (B, C, Ho, Wo, k, k) view, then (B, C*k*k, Ho*Wo) matrix
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    patches = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo)
    w2 = w.data.reshape(K, C * k * k)
    out_data = np.matmul(w2, patches).reshape(B, K, Ho, Wo)
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, K, 1, 1)

    inputs = (x, w) if bias is None else (x, w, bias)

    def make(out):
        def fn(g):
            g2 = g.reshape(B, K, Ho * Wo)
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                dw = np.matmul(g2, patches.transpose(0, 2, 1)).sum(axis=0)
                _accumulate(w, dw.reshape(K, C, k, k))
            if x.requires_grad:
                dp = np.matmul(w2.T, g2).reshape(B, C, k, k, Ho, Wo)
                dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
                for ki in range(k):
                    for kj in range(k):
                        dxp[:, :, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride] += dp[:, :, ki, kj]
                if pad:
                    dxp = dxp[:, :, pad : pad + H, pad : pad + W]
                _accumulate(x, dxp)

        return fn

    return _emit(out_data, inputs, make, "conv2d")


# ---------------------------------------------------------------------------
# bilinear resize

_RESIZE_CACHE = {}


def _resize_matrix(src, dst, dtype):
    """Row-stochastic (dst, src) interpolation matrix, align-corners=false."""
    key = (src, dst, np.dtype(dtype).str)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        lo = math.floor(pos)
        frac = pos - lo
        i0 = min(max(lo, 0), src - 1)
        i1 = min(max(lo + 1, 0), src - 1)
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x, out_h, out_w):
    """Differentiable bilinear resize of (B,C,H,W), align-corners=false."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize expects (B,C,H,W), got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"invalid output size ({out_h}, {out_w})")
    B, C, H, W = x.data.shape
    wy = _resize_matrix(H, out_h, x.data.dtype)
    wx = _resize_matrix(W, out_w, x.data.dtype)
    data = np.matmul(np.matmul(wy, x.data), wx.T)

    def make(out):
        def fn(g):
            if x.requires_grad:
                _accumulate(x, np.matmul(np.matmul(wy.T, g), wx))

        return fn

    return _emit(data, (x,), make, "bilinear_resize")


# ---------------------------------------------------------------------------
# normalization


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Channelwise batch norm over (B,C,H,W).

    Train mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place with EMA momentum; the running
    variance stores the unbiased estimate.  Eval mode normalizes with the
    running buffers, so batch-size-1 inference is well-defined.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, C, H, W = x.data.shape
    gshape = (1, C, 1, 1)
    if training:
        axes = (0, 2, 3)
        m = B * H * W
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        x_hat = (x.data - mu.reshape(gshape)) * inv.reshape(gshape)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.astype(running_mean.dtype)
            unbiased = var * (m / max(m - 1, 1))
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.data.dtype)
        x_hat = (x.data - running_mean.reshape(gshape).astype(x.data.dtype)) * inv.reshape(gshape)
    data = gamma.data.reshape(gshape) * x_hat + beta.data.reshape(gshape)

    def make(out):
        def fn(g):
            if gamma.requires_grad:
                _accumulate(gamma, (g * x_hat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=(0, 2, 3)))
            if not x.requires_grad:
                return
            gy = g * gamma.data.reshape(gshape)
            if training:
                n = B * H * W
                sum_gy = gy.sum(axis=(0, 2, 3), keepdims=True)
                sum_gy_xhat = (gy * x_hat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv.reshape(gshape) / n) * (n * gy - sum_gy - x_hat * sum_gy_xhat)
            else:
                dx = gy * inv.reshape(gshape)
            _accumulate(x, dx)

        return fn

    return _emit(data, (x, gamma, beta), make, "batch_norm2d")


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv
    data = x_hat
    if gamma is not None:
        gamma = as_tensor(gamma)
        data = data * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        data = data + beta.data

    inputs = [x] + [t for t in (gamma, beta) if t is not None]

    def make(out):
        def fn(g):
            if gamma is not None and gamma.requires_grad:
                red = tuple(range(g.ndim - 1))
                _accumulate(gamma, (g * x_hat).sum(axis=red))
            if beta is not None and beta.requires_grad:
                red = tuple(range(g.ndim - 1))
                _accumulate(beta, g.sum(axis=red))
            if not x.requires_grad:
                return
            gy = g * gamma.data if gamma is not None else g
            sum_gy = gy.sum(axis=-1, keepdims=True)
            sum_gy_xhat = (gy * x_hat).sum(axis=-1, keepdims=True)
            dx = (inv / d) * (d * gy - sum_gy - x_hat * sum_gy_xhat)
            _accumulate(x, dx)

        return fn

    return _emit(data, tuple(inputs), make, "layer_norm")
