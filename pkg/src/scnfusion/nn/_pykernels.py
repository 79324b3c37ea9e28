"""Pure-numpy reference kernels.

Same signatures and layouts as the compiled ``_ckernels`` module; used when
the extension is not built or ``SCNFUSION_KERNELS=python`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (B, C, H, W) into per-sample columns (B, C*kh*kw, Ho*Wo)."""
    B, C, H, W = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * Ho : stride, : stride * Wo : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, Ho * Wo)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto an image."""
    B, C, H, W = x_shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = cols.reshape(B, C, kh, kw, Ho, Wo)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k, stride):
    """Window maxima plus the flat in-window argmax (first occurrence on ties)."""
    B, C, H, W = x.shape
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, : stride * Ho : stride, : stride * Wo : stride]
    win = win.reshape(B, C, Ho, Wo, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(dout, arg, x_shape, k, stride):
    B, C, H, W = x_shape
    _, _, Ho, Wo = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    rows = np.arange(Ho)[:, None] * stride + arg // k
    cols = np.arange(Wo)[None, :] * stride + arg % k
    bi = np.arange(B)[:, None, None, None]
    ci = np.arange(C)[None, :, None, None]
    if stride >= k:
        # windows are disjoint, every target index is written once
        dx[bi, ci, rows, cols] = dout
    else:
        np.add.at(dx, (bi, ci, rows, cols), dout)
    return dx


def batchnorm_forward_train(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3))
    xc = x - mean[None, :, None, None]
    var = np.mean(xc * xc, axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, xhat, mean, var, inv


def batchnorm_backward_train(dout, xhat, gamma, inv):
    n = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = np.sum(dout * xhat, axis=(0, 2, 3))
    k = (gamma * inv)[None, :, None, None]
    dx = k * (dout - (dbeta / n)[None, :, None, None] - xhat * (dgamma / n)[None, :, None, None])
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, y):
    return dout * (y > 0.0)
