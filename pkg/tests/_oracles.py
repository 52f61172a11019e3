"""Independent reference implementations used as test oracles."""

import numpy as np

from reverb_t60.autodiff import Tensor


def tensor64(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def max_relative_gradient_error(fn, params, rng, h=1e-6):
    """Compare analytic gradients of ``sum(w * fn())`` with central differences.

    Returns the worst ``max|g - g_num| / max|g_num|`` over ``params``.
    """
    for p in params:
        p.grad = None
    out = fn()
    w = rng.standard_normal(out.shape)
    (out * Tensor(w, dtype=np.float64)).sum().backward()
    worst = 0.0
    for p in params:
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            a = float(np.sum(fn().data * w))
            p.data[idx] = orig - h
            b = float(np.sum(fn().data * w))
            p.data[idx] = orig
            num[idx] = (a - b) / (2 * h)
        g = np.zeros_like(num) if p.grad is None else p.grad
        worst = max(worst, float(np.max(np.abs(g - num)) / (np.max(np.abs(num)) + 1e-12)))
    return worst


def conv2d_loops(x, w, b, sf):
    """Causal-in-time, valid-in-frequency strided correlation."""
    n, c_in, t, f = x.shape
    c_out, _, kt, kf = w.shape
    f_out = (f - kf) // sf + 1
    y = np.zeros((n, c_out, t, f_out))
    for bi in range(n):
        for o in range(c_out):
            for ti in range(t):
                for fo in range(f_out):
                    acc = b[o]
                    for c in range(c_in):
                        for i in range(kt):
                            src = ti - (kt - 1) + i
                            if src < 0:
                                continue
                            for j in range(kf):
                                acc += w[o, c, i, j] * x[bi, c, src, fo * sf + j]
                    y[bi, o, ti, fo] = acc
    return y


def deconv2d_loops(x, w, b, sf):
    """Scatter form of the transposed convolution, keeping the first T frames."""
    n, c_in, t, f = x.shape
    _, c_out, kt, kf = w.shape
    f_out = (f - 1) * sf + kf
    y = np.zeros((n, c_out, t + kt - 1, f_out))
    for bi in range(n):
        for c in range(c_in):
            for ti in range(t):
                for fi in range(f):
                    for o in range(c_out):
                        for i in range(kt):
                            for j in range(kf):
                                y[bi, o, ti + i, fi * sf + j] += x[bi, c, ti, fi] * w[c, o, i, j]
    return y[:, :, :t] + b[None, :, None, None]


def dilated_conv1d_loops(x, w, b, d):
    n, t, _ = x.shape
    k, _, c_out = w.shape
    y = np.tile(b, (n, t, 1)).astype(float)
    for bi in range(n):
        for ti in range(t):
            for i in range(k):
                src = ti - (k - 1 - i) * d
                if src >= 0:
                    y[bi, ti] += x[bi, src] @ w[i]
    return y


def instance_norm_ref(x, eps=1e-5):
    m = x.mean(axis=(2, 3), keepdims=True)
    v = x.var(axis=(2, 3), keepdims=True)
    return (x - m) / np.sqrt(v + eps)


def cumulative_norm_ref(x, eps=1e-5):
    """Per (instance, channel): statistics over frames 0..t and all bins."""
    out = np.zeros_like(x)
    for t in range(x.shape[2]):
        seen = x[:, :, :t + 1]
        m = seen.mean(axis=(2, 3))
        v = seen.var(axis=(2, 3))
        out[:, :, t] = (x[:, :, t] - m[..., None]) / np.sqrt(v[..., None] + eps)
    return out


def cumulative_layer_norm_ref(x, eps=1e-5):
    """x is (n, t, c): statistics over frames 0..t and all channels."""
    out = np.zeros_like(x)
    for t in range(x.shape[1]):
        seen = x[:, :t + 1]
        m = seen.mean(axis=(1, 2))
        v = seen.var(axis=(1, 2))
        out[:, t] = (x[:, t] - m[:, None]) / np.sqrt(v[:, None] + eps)
    return out
