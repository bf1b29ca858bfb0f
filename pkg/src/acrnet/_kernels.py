"""Stride-1 grouped 2-D convolution kernels.

The numba kernels are the production path. ``conv2d_naive`` is a plain
Python loop nest kept as the reference for oracle tests; it is far too slow
for anything but toy shapes.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _fwd(xp, w, groups, out_h, out_w):
    n = xp.shape[0]
    c_out, c_in_g, kh, kw = w.shape
    c_out_g = c_out // groups
    out = np.zeros((n, c_out, out_h, out_w), dtype=xp.dtype)
    for b in range(n):
        for oc in range(c_out):
            g = oc // c_out_g
            for c in range(c_in_g):
                ic = g * c_in_g + c
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, c, i, j]
                        for h in range(out_h):
                            for x in range(out_w):
                                out[b, oc, h, x] += wv * xp[b, ic, h + i, x + j]
    return out


@numba.njit(cache=True)
def _bwd_input(gout, w, groups, pad_h, pad_w):
    n, c_out, out_h, out_w = gout.shape
    _, c_in_g, kh, kw = w.shape
    c_out_g = c_out // groups
    gxp = np.zeros((n, c_in_g * groups, out_h + kh - 1, out_w + kw - 1), dtype=gout.dtype)
    for b in range(n):
        for oc in range(c_out):
            g = oc // c_out_g
            for c in range(c_in_g):
                ic = g * c_in_g + c
                for i in range(kh):
                    for j in range(kw):
                        wv = w[oc, c, i, j]
                        for h in range(out_h):
                            for x in range(out_w):
                                gxp[b, ic, h + i, x + j] += wv * gout[b, oc, h, x]
    return gxp


@numba.njit(cache=True)
def _bwd_weight(xp, gout, groups, kh, kw):
    n, c_out, out_h, out_w = gout.shape
    c_in_g = xp.shape[1] // groups
    c_out_g = c_out // groups
    gw = np.zeros((c_out, c_in_g, kh, kw), dtype=np.float64)
    # accumulate along rows elementwise (vectorisable), reduce each row once
    row = np.empty(out_w, dtype=xp.dtype)
    for b in range(n):
        for oc in range(c_out):
            g = oc // c_out_g
            for c in range(c_in_g):
                ic = g * c_in_g + c
                for i in range(kh):
                    for j in range(kw):
                        row[:] = 0.0
                        for h in range(out_h):
                            for x in range(out_w):
                                row[x] += gout[b, oc, h, x] * xp[b, ic, h + i, x + j]
                        acc = 0.0
                        for x in range(out_w):
                            acc += row[x]
                        gw[oc, c, i, j] += acc
    return gw


def check_conv_shapes(x_shape, w_shape, groups):
    from .errors import ConfigurationError, ShapeError

    if len(x_shape) != 4:
        raise ShapeError(f"conv2d expects a 4-d input (N, C, H, W), got shape {tuple(x_shape)}")
    if len(w_shape) != 4:
        raise ShapeError(f"conv2d expects a 4-d kernel, got shape {tuple(w_shape)}")
    if groups < 1:
        raise ConfigurationError(f"groups must be positive, got {groups}")
    c_in, c_out = x_shape[1], w_shape[0]
    if c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"channel counts ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if w_shape[1] * groups != c_in:
        raise ShapeError(
            f"kernel expects {w_shape[1]} input channels per group x {groups} groups, "
            f"input has {c_in} channels")


def conv2d_forward(x, w, padding, groups):
    """Return (output, padded_input). ``padding`` is (pad_h, pad_w)."""
    check_conv_shapes(x.shape, w.shape, groups)
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_h = xp.shape[2] - w.shape[2] + 1
    out_w = xp.shape[3] - w.shape[3] + 1
    return _fwd(xp, np.ascontiguousarray(w, dtype=x.dtype), groups, out_h, out_w), xp


def conv2d_backward(gout, xp, w, padding, groups):
    """Gradients w.r.t. the (unpadded) input and the kernel."""
    ph, pw = padding
    gout = np.ascontiguousarray(gout)
    gxp = _bwd_input(gout, np.ascontiguousarray(w, dtype=gout.dtype), groups, ph, pw)
    h, w_ = gxp.shape[2] - 2 * ph, gxp.shape[3] - 2 * pw
    gx = gxp[:, :, ph:ph + h, pw:pw + w_]
    gw = _bwd_weight(xp, gout, groups, w.shape[2], w.shape[3]).astype(w.dtype)
    return np.ascontiguousarray(gx), gw


def conv2d_naive(x, w, padding=(0, 0), groups=1, bias=None):
    """Direct loop-nest convolution (cross-correlation), float64 accumulation."""
    check_conv_shapes(np.shape(x), np.shape(w), groups)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c_in, height, width = x.shape
    c_out, c_in_g, kh, kw = w.shape
    ph, pw = padding
    out_h = height + 2 * ph - kh + 1
    out_w = width + 2 * pw - kw + 1
    c_out_g = c_out // groups
    out = np.zeros((n, c_out, out_h, out_w))
    for b in range(n):
        for oc in range(c_out):
            g = oc // c_out_g
            for h in range(out_h):
                for col in range(out_w):
                    s = 0.0 if bias is None else float(bias[oc])
                    for c in range(c_in_g):
                        ic = g * c_in_g + c
                        for i in range(kh):
                            for j in range(kw):
                                r, q = h + i - ph, col + j - pw
                                if 0 <= r < height and 0 <= q < width:
                                    s += x[b, ic, r, q] * w[oc, c, i, j]
                    out[b, oc, h, col] = s
    return out


@numba.njit(cache=True)
def prelu_fwd(x, slopes):
    """slopes has one entry per channel."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            a = slopes[ch]
            for i in range(h):
                for j in range(w):
                    v = x[b, ch, i, j]
                    out[b, ch, i, j] = a * v if v < 0 else v
    return out


@numba.njit(cache=True)
def prelu_bwd(x, slopes, g):
    """Return (grad_x, per-channel grad of the slope)."""
    n, c, h, w = x.shape
    gx = np.empty_like(g)
    ga = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        a = slopes[ch]
        acc = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    v = x[b, ch, i, j]
                    gv = g[b, ch, i, j]
                    if v < 0:
                        gx[b, ch, i, j] = a * gv
                        acc += gv * v
                    else:
                        gx[b, ch, i, j] = gv
        ga[ch] = acc
    return gx, ga


@numba.njit(cache=True)
def channel_moments(x):
    """Per-channel mean and biased variance over (N, H, W), float64."""
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    s += x[b, ch, i, j]
        mu = s / m
        q = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    d = x[b, ch, i, j] - mu
                    q += d * d
        mean[ch] = mu
        var[ch] = q / m
    return mean, var


@numba.njit(cache=True)
def affine_normalize(x, mean, invstd, gamma, beta):
    """Return (xhat, gamma * xhat + beta) with per-channel statistics."""
    n, c, h, w = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            mu = mean[ch]
            s = invstd[ch]
            ga = gamma[ch]
            be = beta[ch]
            for i in range(h):
                for j in range(w):
                    v = (x[b, ch, i, j] - mu) * s
                    xhat[b, ch, i, j] = v
                    out[b, ch, i, j] = v * ga + be
    return xhat, out


@numba.njit(cache=True)
def bn_train_bwd(g, xhat, gamma, invstd):
    """Batch-statistics BN backward: (grad_x, grad_gamma, grad_beta)."""
    n, c, h, w = g.shape
    m = n * h * w
    gx = np.empty_like(g)
    ggamma = np.zeros(c)
    gbeta = np.zeros(c)
    for ch in range(c):
        s1 = 0.0
        s2 = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    gv = g[b, ch, i, j]
                    s1 += gv
                    s2 += gv * xhat[b, ch, i, j]
        gbeta[ch] = s1
        ggamma[ch] = s2
        k = gamma[ch] * invstd[ch] / m
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    gx[b, ch, i, j] = k * (m * g[b, ch, i, j] - s1 - xhat[b, ch, i, j] * s2)
    return gx, ggamma, gbeta
