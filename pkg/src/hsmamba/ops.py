"""Differentiable primitives on :class:`~hsmamba.tensor.Tensor`.

Feature maps are channel-first ``(C, H, W)`` without a batch axis; the whole
scene is processed as a single sample.
"""

import numpy as np
from scipy.special import expit

from .errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor, record


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), back, "mul")


def neg(a):
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------- shape surgery

def reshape(a, shape):
    a = as_tensor(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return record(a.data[idx], (a,), back, "getitem")


def pad_high(a, pads):
    """Zero-pad trailing edges; ``pads`` gives the amount per axis."""
    a = as_tensor(a)
    width = [(0, int(p)) for p in pads]
    if not any(p for _, p in width):
        return a
    sl = tuple(slice(0, n) for n in a.shape)
    return record(np.pad(a.data, width), (a,), lambda g: (g[sl],), "pad_high")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def einsum(spec, *operands):
    """Differentiable einsum for explicit ``'ab,bc->ac'`` specs without ellipsis
    or repeated indices within one operand."""
    operands = [as_tensor(o) for o in operands]
    lhs, out_subs = spec.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise DimensionError(f"einsum spec {spec!r} expects {len(in_subs)} operands")
    result = np.einsum(spec, *(o.data for o in operands))

    def back(g):
        grads = []
        for i, (subs, op) in enumerate(zip(in_subs, operands)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(in_subs) if j != i]
            avail = set(out_subs).union(*others)
            target = "".join(c for c in subs if c in avail)
            gi = np.einsum(",".join([out_subs] + others) + "->" + target, g,
                           *(o.data for j, o in enumerate(operands) if j != i))
            if target != subs:
                for ax, c in enumerate(subs):
                    if c not in avail:
                        gi = np.expand_dims(gi, ax)
                gi = np.broadcast_to(gi, op.shape).copy()
            grads.append(gi)
        return tuple(grads)

    return record(np.asarray(result), operands, back, "einsum")


# ---------------------------------------------------------------- activations

def sigmoid(a):
    a = as_tensor(a)
    s = expit(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return record(out, (a,), lambda g: (g * expit(a.data),), "softplus")


def silu(a):
    a = as_tensor(a)
    x = a.data
    s = expit(x)

    def back(g):
        return (g * s * (1.0 + x * (1.0 - s)),)

    return record(x * s, (a,), back, "silu")


# ------------------------------------------------------------------- conv/norm

def pointwise_conv(x, kernel, bias=None):
    """1x1 convolution: ``out[o, ...] = bias[o] + sum_i kernel[o, i] * x[i, ...]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[0]:
        raise DimensionError(
            f"kernel {kernel.shape} does not match input channels {x.shape[0]}")
    flat = x.data.reshape(x.shape[0], -1)
    out = kernel.data @ flat
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise DimensionError(f"bias {bias.shape} != ({kernel.shape[0]},)")
        out = out + bias.data[:, None]
        parents.append(bias)
    out_shape = (kernel.shape[0],) + x.shape[1:]

    def back(g):
        g2 = g.reshape(kernel.shape[0], -1)
        grads = [(kernel.data.T @ g2).reshape(x.shape), g2 @ flat.T]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return record(out.reshape(out_shape), parents, back, "pointwise_conv")


def dilated_conv3x3(x, kernel, dilation=1, bias=None):
    """3x3 cross-correlation with taps ``dilation`` apart; zero padding keeps H, W."""
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[1:] != (x.shape[0], 3, 3):
        raise DimensionError(f"kernel {kernel.shape} incompatible with input {x.shape}")
    d = int(dilation)
    _, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (d, d), (d, d)))
    k = kernel.data
    out = np.zeros((k.shape[0], H, W), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            win = xp[:, i * d:i * d + H, j * d:j * d + W]
            out += np.tensordot(k[:, :, i, j], win, axes=(1, 0))
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def back(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for i in range(3):
            for j in range(3):
                win = xp[:, i * d:i * d + H, j * d:j * d + W]
                gxp[:, i * d:i * d + H, j * d:j * d + W] += np.tensordot(
                    k[:, :, i, j], g, axes=(0, 0))
                gk[:, :, i, j] = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        grads = [gxp[:, d:d + H, d:d + W], gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return record(out, parents, back, "dilated_conv3x3")


def group_norm(x, groups, scale, shift, eps=1e-5):
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    C = x.shape[0]
    if groups < 1 or C % groups:
        raise DimensionError(f"{C} channels not divisible into {groups} groups")
    xg = x.data.reshape(groups, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (C,) + (1,) * (x.ndim - 1)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
    red = tuple(range(1, x.ndim))

    def back(g):
        gxhat = (g * scale.data.reshape(bshape)).reshape(groups, -1)
        xh = xhat.reshape(groups, -1)
        gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True)
                    - xh * (gxhat * xh).mean(axis=1, keepdims=True))
        return gx.reshape(x.shape), (g * xhat).sum(axis=red), g.sum(axis=red)

    return record(out, (x, scale, shift), back, "group_norm")


# -------------------------------------------------------------------- pooling

def avg_pool2x2(x):
    """2x2 mean pooling over (H, W); odd extents are zero-padded on the high side."""
    x = as_tensor(x)
    C, H, W = x.shape
    H2, W2 = -(-H // 2), -(-W // 2)
    xp = np.pad(x.data, ((0, 0), (0, 2 * H2 - H), (0, 2 * W2 - W)))
    out = xp.reshape(C, H2, 2, W2, 2).mean(axis=(2, 4))

    def back(g):
        full = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (full[:, :H, :W],)

    return record(out, (x,), back, "avg_pool2x2")


def global_avg_pool(x):
    x = as_tensor(x)
    C = x.shape[0]
    n = x.data[0].size
    out = x.data.reshape(C, -1).mean(axis=1).reshape(C, 1, 1)
    return record(out, (x,),
                  lambda g: (np.broadcast_to(g.reshape((C,) + (1,) * (x.ndim - 1)) / n,
                                             x.shape).copy(),), "global_avg_pool")


def global_max_pool(x):
    x = as_tensor(x)
    C = x.shape[0]
    flat = x.data.reshape(C, -1)
    idx = flat.argmax(axis=1)
    out = flat[np.arange(C), idx].reshape(C, 1, 1)

    def back(g):
        full = np.zeros_like(flat)
        full[np.arange(C), idx] = g.reshape(C)
        return (full.reshape(x.shape),)

    return record(out, (x,), back, "global_max_pool")


def channel_mean(x):
    x = as_tensor(x)
    C = x.shape[0]
    out = x.data.mean(axis=0, keepdims=True)
    return record(out, (x,), lambda g: (np.broadcast_to(g / C, x.shape).copy(),),
                  "channel_mean")


def channel_max(x):
    x = as_tensor(x)
    idx = x.data.argmax(axis=0)
    out = np.take_along_axis(x.data, idx[None], axis=0)

    def back(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[None], g, axis=0)
        return (full,)

    return record(out, (x,), back, "channel_max")


def upsample_nearest(x, factor):
    x = as_tensor(x)
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    f = int(factor)
    if f == 1:
        return x
    C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)
    return record(out, (x,), lambda g: (g.reshape(C, H, f, W, f).sum(axis=(2, 4)),),
                  "upsample_nearest")


__all__ = [
    "Tensor", "add", "sub", "mul", "neg", "exp", "sum", "mean", "reshape", "transpose",
    "getitem", "pad_high", "concat", "stack", "einsum", "sigmoid", "softplus", "silu",
    "pointwise_conv", "dilated_conv3x3", "group_norm", "avg_pool2x2", "global_avg_pool",
    "global_max_pool", "channel_mean", "channel_max", "upsample_nearest",
]
