"""Differentiable primitives.

Each function takes :class:`Tensor` (or array-like) inputs, computes the
forward value with numpy and registers a closure for the reverse pass.
Shape problems raise :class:`ShapeError` naming the primitive and the
offending shapes.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import kernels
from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _shape_error(op, *shapes, detail=""):
    shown = " vs ".join(str(tuple(s)) for s in shapes)
    msg = f"{op}: incompatible shapes {shown}"
    if detail:
        msg += f" ({detail})"
    return ShapeError(msg)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return make_result("exp", y, (a,), lambda g: (g * y,))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip values; gradient passes only where the input was inside the range."""
    a = as_tensor(a)
    x = a.data
    y = np.clip(x, lo, hi)
    mask = np.ones_like(x, dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return make_result("clamp", y, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return make_result("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    return make_result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", y, (a,), bw)


def log_softmax(a, axis=-1) -> Tensor:
    """``x - logsumexp(x)`` in the shifted, overflow-free form."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", y, (a,), bw)


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    y = np.squeeze(out_keep, axis=axis)

    def bw(g):
        return (np.expand_dims(g, axis) * np.exp(a.data - out_keep),)

    return make_result("logsumexp", y, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    y = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", y, (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    y = np.asarray(a.data.mean(axis=axis))
    count = a.data.size // max(y.size, 1)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result("mean", y, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return make_result("reshape", y, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(t.shape for t in tensors), detail=f"axis={axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", y, tensors, bw)


def getitem(a, index) -> Tensor:
    """Numpy-style indexing (basic or integer-array) with scatter-add backward."""
    a = as_tensor(a)
    y = np.asarray(a.data[index])

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result("getitem", y, (a,), bw)


# ---------------------------------------------------------------------------
# layers


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``x`` (B, in), ``w`` (out, in), ``b`` (out,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise _shape_error("linear", x.shape, w.shape, detail="expected (B, in) and (out, in)")
    y = x.data @ w.data.T
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise _shape_error("linear", w.shape, b.shape, detail="bias must be (out,)")
        y = y + b.data
        inputs.append(b)

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = g.T @ x.data if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result("linear", y, inputs, bw)


def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation. ``x`` is NCHW, ``w`` is OIHW."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape, detail="expected NCHW input and OIHW kernel")
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    OH, OW = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if OH < 1 or OW < 1:
        raise _shape_error("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    w2 = w.data.reshape(O, -1)
    y = np.matmul(w2, cols)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise _shape_error("conv2d", w.shape, b.shape, detail="bias must be (out_channels,)")
        y += b.data[:, None]
        inputs.append(b)
    y = y.reshape(N, O, OH, OW)

    def bw(g):
        g2 = g.reshape(N, O, OH * OW)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(w2.T, g2), C, H, W, kh, kw, stride, padding)
        if w.requires_grad:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=(0, 2))

    return make_result("conv2d", y, inputs, bw)


def conv2d_transpose(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Transposed convolution (the adjoint of :func:`conv2d`).

    ``x`` is NCHW and ``w`` has shape (C_in, C_out, kH, kW). The output side
    is ``(H - 1) * stride - 2 * padding + kH``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise _shape_error(
            "conv2d_transpose", x.shape, w.shape, detail="expected NCHW input and (C_in, C_out, kH, kW) kernel"
        )
    N, Cin, H, W = x.shape
    _, Cout, kh, kw = w.shape
    OH = (H - 1) * stride - 2 * padding + kh
    OW = (W - 1) * stride - 2 * padding + kw
    if OH < 1 or OW < 1:
        raise _shape_error("conv2d_transpose", x.shape, w.shape, detail="non-positive output size")
    w2 = w.data.reshape(Cin, -1)
    xf = x.data.reshape(N, Cin, H * W)
    y = kernels.col2im(np.matmul(w2.T, xf), Cout, OH, OW, kh, kw, stride, padding)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Cout,):
            raise _shape_error("conv2d_transpose", w.shape, b.shape, detail="bias must be (out_channels,)")
        y += b.data[:, None, None]
        inputs.append(b)

    def bw(g):
        gcols = kernels.im2col(g, kh, kw, stride, padding)
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(w2, gcols).reshape(x.shape)
        if w.requires_grad:
            gw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result("conv2d_transpose", y, inputs, bw)


def batchnorm2d(x, gamma, beta, running_mean=None, running_var=None, training=True,
                momentum=0.1, eps=1e-5, update_stats=True) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the batch statistics are used and, when
    ``update_stats`` is set, ``running_mean``/``running_var`` (plain arrays)
    are updated in place with the unbiased batch variance. In evaluation mode
    the running statistics are used and treated as constants.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("batchnorm2d", x.shape, gamma.shape, beta.shape)
    C = x.shape[1]
    axes = (0, 2, 3)
    m = x.data.size // C
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats and running_mean is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[:, None, None]) * inv_std[:, None, None]
    y = xhat * gamma.data[:, None, None] + beta.data[:, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std)[:, None, None]
            if training:
                gx = scale / m * (m * g - gb[:, None, None] - xhat * gg[:, None, None])
            else:
                gx = g * scale
        return gx, gg, gb

    return make_result("batchnorm2d", y, (x, gamma, beta), bw)


PRIMITIVES = {
    "linear": linear,
    "conv2d": conv2d,
    "conv2d_transpose": conv2d_transpose,
    "batchnorm2d": batchnorm2d,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "logsumexp": logsumexp,
    "log": log,
    "exp": exp,
    "clamp": clamp,
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "sum": sum,
    "mean": mean,
    "reshape": reshape,
    "concat": concat,
    "getitem": getitem,
}


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Apply the primitive called ``kind`` to ``inputs``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)
