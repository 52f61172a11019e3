"""Fused layer kernels used by the mask and regression networks.

Layouts: 2-D feature maps are ``(batch, channels, frames, bins)``; sequence
features for the temporal stack are ``(batch, frames, channels)``. Every
time-axis operation is causal: output frame ``t`` reads input frames ``<= t``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..exceptions import InvalidArgumentError
from .tensor import add, make_node, mul, prelu, relu, sigmoid

__all__ = ["conv2d", "conv_transpose2d", "dilated_conv1d", "linear", "glu_gate", "glu_split",
           "instance_norm", "cumulative_layer_norm", "prelu", "relu", "sigmoid"]


def _check_ndim(x, ndim, name):
    if x.ndim != ndim:
        raise InvalidArgumentError(f"{name} expects a {ndim}-D input, got shape {x.shape}")


def _im2col(xl, kt, kf, sf, f_out):
    """Patches of a time-padded channels-last map ``(n, t + kt - 1, F, c)``
    as a ``(n * t * f_out, c * kt * kf)`` matrix."""
    win = sliding_window_view(xl, (kt, kf), axis=(1, 2))[:, :, ::sf][:, :, :f_out]
    return win.reshape(-1, xl.shape[3] * kt * kf)


def _col2im(cols, shape, kt, kf, sf):
    """Adjoint of :func:`_im2col`: scatter-add patch rows back onto a
    channels-last map of ``shape`` (already padded in time)."""
    n, tp, f, c = shape
    t = tp - kt + 1
    f_out = (f - kf) // sf + 1
    span = sf * (f_out - 1) + 1
    cols = cols.reshape(n, t, f_out, c, kt, kf)
    acc = np.zeros(shape, dtype=cols.dtype)
    for i in range(kt):
        for j in range(kf):
            acc[:, i:i + t, j:j + span:sf] += cols[..., i, j]
    return acc


def _channels_last(a, pad_front=0, pad_back=0):
    out = a.transpose(0, 2, 3, 1)
    if pad_front or pad_back:
        return np.pad(out, ((0, 0), (pad_front, pad_back), (0, 0), (0, 0)))
    return np.ascontiguousarray(out)


def conv2d(x, weight, bias=None, stride=(1, 2)):
    """Causal 2-D convolution over (frames, bins).

    ``weight`` has shape ``(out, in, k_t, k_f)``. The time axis gets
    ``k_t - 1`` leading zero frames so the frame count is preserved; the
    frequency axis is unpadded, giving ``(F - k_f) // s_f + 1`` bins.
    """
    _check_ndim(x, 4, "conv2d")
    c_out, c_in, kt, kf = weight.shape
    st, sf = stride
    if st != 1:
        raise InvalidArgumentError("only unit stride along time is supported")
    n, c, t, f = x.shape
    if c != c_in:
        raise InvalidArgumentError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if f < kf:
        raise InvalidArgumentError(f"conv2d: {f} bins is narrower than kernel {kf}")
    f_out = (f - kf) // sf + 1
    xl = _channels_last(x.data, kt - 1)
    cols = _im2col(xl, kt, kf, sf, f_out)
    w2 = weight.data.reshape(c_out, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, t, f_out, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        gx = gw = gb = None
        gl = _channels_last(g).reshape(-1, c_out)
        if x.requires_grad:
            gx = _col2im(gl @ w2, xl.shape, kt, kf, sf)[:, kt - 1:]
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (gl.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gl.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride=(1, 2)):
    """Causal transposed convolution (the adjoint of a strided conv in bins).

    ``weight`` has shape ``(in, out, k_t, k_f)``; output bins are
    ``(F - 1) * s_f + k_f``. Along time the full transposed output has
    ``T + k_t - 1`` frames and only the first ``T`` are kept, so output frame
    ``t`` depends on input frames ``t - k_t + 1 .. t``.
    """
    _check_ndim(x, 4, "conv_transpose2d")
    c_in, c_out, kt, kf = weight.shape
    st, sf = stride
    if st != 1:
        raise InvalidArgumentError("only unit stride along time is supported")
    n, c, t, f = x.shape
    if c != c_in:
        raise InvalidArgumentError(
            f"conv_transpose2d: input has {c} channels, weight expects {c_in}")
    f_out = (f - 1) * sf + kf
    xl = _channels_last(x.data).reshape(-1, c_in)
    # column order (c_out, kt, kf) matches _im2col's patch layout
    w2 = weight.data.reshape(c_in, -1)
    full = _col2im(xl @ w2, (n, t + kt - 1, f_out, c_out), kt, kf, sf)
    if bias is not None:
        full += bias.data
    out = np.ascontiguousarray(full[:, :t].transpose(0, 3, 1, 2))

    def backward(g):
        gx = gw = gb = None
        cols = _im2col(_channels_last(g, 0, kt - 1), kt, kf, sf, f)
        if x.requires_grad:
            gx = (cols @ w2.T).reshape(n, t, f, c_in)
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if weight.requires_grad:
            gw = (xl.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def dilated_conv1d(x, weight, bias=None, dilation=1):
    """Causal dilated convolution on ``(batch, frames, channels)`` input.

    ``weight`` has shape ``(kernel, in, out)``; ``(kernel - 1) * dilation``
    zero frames are prepended.
    """
    _check_ndim(x, 3, "dilated_conv1d")
    k, c_in, c_out = weight.shape
    n, t, c = x.shape
    if c != c_in:
        raise InvalidArgumentError(
            f"dilated_conv1d: input has {c} channels, weight expects {c_in}")
    pad = (k - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (pad, 0), (0, 0)))
    out = np.zeros((n, t, c_out), dtype=x.dtype)
    for i in range(k):
        out += xp[:, i * dilation:i * dilation + t] @ weight.data[i]
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i * dilation:i * dilation + t] += g @ weight.data[i].T
            gx = gxp[:, pad:]
        if weight.requires_grad:
            gw = np.stack([np.tensordot(xp[:, i * dilation:i * dilation + t], g,
                                        axes=([0, 1], [0, 1])) for i in range(k)])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def linear(x, weight, bias=None):
    """Affine map of the last axis: ``x @ weight + bias``, weight ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise InvalidArgumentError(
            f"linear: last axis {x.shape[-1]} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def glu_gate(a, b):
    """Gated linear unit ``a * sigmoid(b)``."""
    if a.shape != b.shape:
        raise InvalidArgumentError(f"glu_gate: shapes differ {a.shape} vs {b.shape}")
    return mul(a, sigmoid(b))


def glu_split(y, axis):
    """Split ``y`` in half along ``axis`` and gate: ``first * sigmoid(second)``.

    Lets a content and a gate convolution run as one call with stacked
    weights.
    """
    c = y.shape[axis]
    if c % 2:
        raise InvalidArgumentError(f"glu_split: axis {axis} has odd size {c}")
    a, b = np.split(y.data, 2, axis=axis)
    s = expit(b)
    out = a * s

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=axis),)

    return make_node(out, (y,), backward)


def _cumulative_standardize(x, eps):
    """Standardize ``x`` of shape (n, g, t, k) with running statistics.

    Frame ``t`` of group ``g`` is normalized by the mean and variance of
    every element in frames ``0..t`` of that group.
    """
    n, grp, t, k = x.shape
    xd = x.data
    acc = np.float64  # running variance in float32 loses precision
    count = (np.arange(1, t + 1, dtype=acc) * k)[None, None, :]
    s1 = np.cumsum(xd.sum(axis=3, dtype=acc), axis=2)
    s2 = np.cumsum((xd.astype(acc) ** 2).sum(axis=3), axis=2)
    m = s1 / count
    var = np.maximum(s2 / count - m * m, 0.0)
    r = 1.0 / np.sqrt(var + eps)
    centered = xd - m[..., None].astype(xd.dtype)
    out = (centered * r[..., None].astype(xd.dtype)).astype(xd.dtype)

    def backward(g):
        gr = np.sum(g * centered, axis=3, dtype=acc)
        gm = -r * np.sum(g, axis=3, dtype=acc)
        gv = -0.5 * gr * r ** 3
        gm_total = gm - 2.0 * m * gv
        gs1 = np.flip(np.cumsum(np.flip(gm_total / count, 2), axis=2), 2)
        gs2 = np.flip(np.cumsum(np.flip(gv / count, 2), axis=2), 2)
        gx = g * r[..., None] + gs1[..., None] + 2.0 * xd * gs2[..., None]
        return (gx.astype(xd.dtype),)

    return make_node(out, (x,), backward)


def instance_norm(x, gamma=None, beta=None, causal=False, eps=1e-5):
    """Per-instance, per-channel normalization of ``(n, c, t, f)`` maps.

    With ``causal=False`` statistics cover the whole ``t x f`` plane. With
    ``causal=True`` frame ``t`` uses the statistics of frames ``0..t`` only,
    which keeps the network causal. ``gamma``/``beta`` hold one value per
    channel.
    """
    _check_ndim(x, 4, "instance_norm")
    n, c, t, f = x.shape
    if causal:
        if f < 2 and t < 2:
            raise InvalidArgumentError("instance_norm needs at least two elements per channel")
        y = _cumulative_standardize(x, eps)
    else:
        if t * f < 2:
            raise InvalidArgumentError("instance_norm needs at least two elements per channel")
        flat = x.reshape(n, c, 1, t * f)
        y = _cumulative_standardize(flat, eps).reshape(n, c, t, f)
    if gamma is not None:
        y = mul(y, gamma.reshape(1, c, 1, 1))
    if beta is not None:
        y = add(y, beta.reshape(1, c, 1, 1))
    return y


def cumulative_layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Causal normalization of ``(n, t, c)`` sequences over channels and
    all frames so far; ``gamma``/``beta`` are per channel."""
    _check_ndim(x, 3, "cumulative_layer_norm")
    n, t, c = x.shape
    y = _cumulative_standardize(x.reshape(n, 1, t, c), eps).reshape(n, t, c)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y
