"""Differentiable primitives over ``TensorND``.

Every function computes its forward result with numpy and, when a tape is
recording, attaches a closure producing the input gradients from the output
gradient. Layout is NCHW throughout.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import TensorND, as_tensor, make_output


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: TensorND, b: TensorND) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> TensorND:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_output("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> TensorND:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_output("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> TensorND:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return make_output("mul", ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> TensorND:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_output("div", out, (a, b),
                       lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def log(x) -> TensorND:
    x = as_tensor(x)
    xd = x.data
    return make_output("log", np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x, lo: float, hi: float) -> TensorND:
    """Clip to [lo, hi]; the gradient is zero where clipping is active."""
    x = as_tensor(x)
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_output("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# -- activations -----------------------------------------------------------

def relu(x) -> TensorND:
    x = as_tensor(x)
    pos = x.data > 0
    return make_output("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> TensorND:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return make_output("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x, axis: int = 1) -> TensorND:
    """Softmax over ``axis`` (the channel axis by default)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", s, (x,), backward)


# -- reductions and shape --------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> TensorND:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = g.reshape(np.shape(out))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> TensorND:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape: Sequence[int]) -> TensorND:
    x = as_tensor(x)
    old = x.shape
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int] | None = None) -> TensorND:
    """Permute axes; with ``axes=None`` swap the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 1) -> TensorND:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat: need at least one tensor")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ValueError(f"concat: shapes {ref} and {t.shape} differ outside axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return make_output("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                       lambda g: tuple(np.split(g, splits, axis=axis)))


def take_channels(x, start: int, stop: int) -> TensorND:
    """Channels [start, stop) of an NCHW tensor."""
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"take_channels: [{start}, {stop}) out of range for {x.shape[1]} channels")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return make_output("take_channels", x.data[:, start:stop].copy(), (x,), backward)


def matmul(a, b) -> TensorND:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_output("matmul", ad @ bd, (a, b), backward)


# -- convolution -----------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    """View of shape (B, C, kh, kw, ho, wo) over a padded NCHW array."""
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], kh, kw, ho, wo),
        strides=(sb, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> TensorND:
    """2-D cross-correlation of (B, C_in, H, W) or (C_in, H, W) input."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1 or padding < 0 or dilation < 1:
        raise ValueError(f"conv2d: need stride >= 1, padding >= 0, dilation >= 1 "
                         f"(got {stride}, {padding}, {dilation})")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be (C_out, C_in, kh, kw), got {weight.shape}")
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d: input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    B, C, H, W = xd.shape
    cout, cin, kh, kw = weight.shape
    if cin != C:
        raise ValueError(f"conv2d: input has {C} channels but weight expects {cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    eff_h, eff_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if eff_h > H + 2 * padding or eff_w > W + 2 * padding:
        raise ValueError(f"conv2d: effective kernel {eff_h}x{eff_w} larger than padded input "
                         f"{H + 2 * padding}x{W + 2 * padding}")
    ho = conv_output_size(H, kh, stride, padding, dilation)
    wo = conv_output_size(W, kw, stride, padding, dilation)

    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = xd.transpose(1, 0, 2, 3).reshape(C, B * H * W)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = _windows(xp, kh, kw, ho, wo, stride, dilation)
        cols = win.transpose(1, 2, 3, 0, 4, 5).reshape(C * kh * kw, B * ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, B, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if unbatched:
        out = out[0]

    def backward(g):
        if unbatched:
            g = g[None]
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, B * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        dcols = w2.T @ g2
        if kh == kw == 1 and stride == 1 and padding == 0:
            gx = np.ascontiguousarray(dcols.reshape(C, B, H, W).transpose(1, 0, 2, 3))
        else:
            dcols = dcols.reshape(C, kh, kw, B, ho, wo)
            gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + hspan:stride, c0:c0 + wspan:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if unbatched:
            gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output("conv2d", out, inputs, backward)


# -- normalization ---------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batch_norm(x, gamma, beta, stats: RunningStats, training: bool, eps: float = 1e-5) -> TensorND:
    """Per-channel normalization over (B, H, W).

    Training mode normalizes with biased batch statistics and moves the
    running estimates by ``stats.momentum`` (unbiased variance); eval mode
    uses the running estimates.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    if x.ndim != 4:
        raise ValueError(f"batch_norm: expected (B, C, H, W), got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: gamma/beta must have shape ({C},)")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        m = stats.momentum
        stats.mean = (1 - m) * stats.mean + m * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        stats.var = (1 - m) * stats.var + m * unbiased
    else:
        n = None
        mu, var = stats.mean, stats.var
        xc = xd - mu[None, :, None, None]
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            gx = (invstd[None, :, None, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * invstd[None, :, None, None]
        return gx, gg, gb

    return make_output("batch_norm", out, (x, gamma, beta), backward)


# -- resampling ------------------------------------------------------------

def max_pool2d(x, size: int = 2) -> TensorND:
    """Non-overlapping ``size`` x ``size`` max pooling (stride = size)."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ValueError(f"max_pool2d: spatial extent {H}x{W} not divisible by {size}")
    blocks = x.data.reshape(B, C, H // size, size, W // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, H // size, W // size, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, H // size, W // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(B, C, H, W),)

    return make_output("max_pool2d", out, (x,), backward)


def avg_pool2d(x, size: int = 2) -> TensorND:
    """Non-overlapping ``size`` x ``size`` mean pooling (stride = size)."""
    x = as_tensor(x)
    *lead, H, W = x.shape
    if H % size or W % size:
        raise ValueError(f"avg_pool2d: spatial extent {H}x{W} not divisible by {size}")
    out = x.data.reshape(*lead, H // size, size, W // size, size).mean(axis=(-3, -1))

    def backward(g):
        gx = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size)
        return (gx,)

    return make_output("avg_pool2d", out, (x,), backward)


def pixel_shuffle(x, r: int) -> TensorND:
    """(B, c*r*r, H, W) -> (B, c, r*H, r*W); channel c*r*r + dy*r + dx lands at (r*h+dy, r*w+dx)."""
    x = as_tensor(x)
    B, Cr, H, W = x.shape
    if r < 1 or Cr % (r * r):
        raise ValueError(f"pixel_shuffle: channel count {Cr} not divisible by r^2 = {r * r}")
    c = Cr // (r * r)
    out = x.data.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * r, W * r)

    def backward(g):
        gx = g.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, Cr, H, W)
        return (gx,)

    return make_output("pixel_shuffle", np.ascontiguousarray(out), (x,), backward)


def bilinear_matrix(n_in: int, scale: int) -> np.ndarray:
    """(scale*n_in, n_in) resampling matrix, half-pixel centres, edge clamping."""
    n_out = n_in * scale
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    A = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1.0 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def interpolate_bilinear(x, scale: int) -> TensorND:
    x = as_tensor(x)
    if scale < 1:
        raise ValueError(f"interpolate_bilinear: scale must be >= 1, got {scale}")
    if x.ndim != 4:
        raise ValueError(f"interpolate_bilinear: expected (B, C, H, W), got {x.shape}")
    if scale == 1:
        return make_output("interpolate_bilinear", x.data.copy(), (x,), lambda g: (g,))
    H, W = x.shape[2:]
    Ah = bilinear_matrix(H, scale)
    Aw = bilinear_matrix(W, scale)
    out = Ah @ x.data @ Aw.T
    return make_output("interpolate_bilinear", out, (x,), lambda g: (Ah.T @ g @ Aw,))


def unfold_regions(x, size: int, stride: int = 1) -> TensorND:
    """Stack each ``size`` x ``size`` window into a vector.

    (B, C, H, W) -> (B, C, size*size, n_windows); windows start every
    ``stride`` pixels and must lie fully inside the map.
    """
    x = as_tensor(x)
    B, C, H, W = x.shape
    if size > H or size > W:
        raise ValueError(f"unfold_regions: window {size} larger than map {H}x{W}")
    ho = (H - size) // stride + 1
    wo = (W - size) // stride + 1
    win = _windows(x.data, size, size, ho, wo, stride, 1)
    out = win.reshape(B, C, size * size, ho * wo)

    def backward(g):
        g6 = g.reshape(B, C, size, size, ho, wo)
        gx = np.zeros((B, C, H, W))
        hspan = stride * (ho - 1) + 1
        wspan = stride * (wo - 1) + 1
        for i in range(size):
            for j in range(size):
                gx[:, :, i:i + hspan:stride, j:j + wspan:stride] += g6[:, :, i, j]
        return (gx,)

    return make_output("unfold_regions", out, (x,), backward)
