# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im and max-pool kernels (float64 only)."""
import numpy as np
cimport numpy as cnp

from libc.math cimport sqrt

cnp.import_array()


def im2col(double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    out_arr = np.empty((B, C * kh * kw, Ho * Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, b, oy, ox, iy, ix, row, col
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        col = 0
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                for ox in range(Wo):
                                    out[b, row, col] = 0.0
                                    col += 1
                                continue
                            for ox in range(Wo):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= W:
                                    out[b, row, col] = 0.0
                                else:
                                    out[b, row, col] = x[b, c, iy, ix]
                                col += 1
    return out_arr


def col2im(cols_in, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef double[:, :, ::1] cols = np.ascontiguousarray(cols_in, dtype=np.float64)
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, b, oy, ox, iy, ix, row, col
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        col = 0
                        for oy in range(Ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= H:
                                col += Wo
                                continue
                            for ox in range(Wo):
                                ix = ox * stride + j - pad
                                if ix >= 0 and ix < W:
                                    out[b, c, iy, ix] += cols[b, row, col]
                                col += 1
    return out_arr


def maxpool_forward(double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - k) // stride + 1
    cdef Py_ssize_t Wo = (W - k) // stride + 1
    out_arr = np.empty((B, C, Ho, Wo), dtype=np.float64)
    arg_arr = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, oy, ox, i, j, best_idx
    cdef double best, v
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        best = x[b, c, oy * stride, ox * stride]
                        best_idx = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, c, oy * stride + i, ox * stride + j]
                                # strict comparison keeps the first maximum
                                if v > best:
                                    best = v
                                    best_idx = i * k + j
                        out[b, c, oy, ox] = best
                        arg[b, c, oy, ox] = best_idx
    return out_arr, arg_arr


def maxpool_backward(dout_in, arg_in, tuple x_shape, Py_ssize_t k, Py_ssize_t stride):
    cdef double[:, :, :, ::1] dout = np.ascontiguousarray(dout_in, dtype=np.float64)
    cdef cnp.int64_t[:, :, :, ::1] arg = np.ascontiguousarray(arg_in, dtype=np.int64)
    dx_arr = np.zeros(x_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], Ho = dout.shape[2], Wo = dout.shape[3]
    cdef Py_ssize_t b, c, oy, ox, a
    with nogil:
        for b in range(B):
            for c in range(C):
                for oy in range(Ho):
                    for ox in range(Wo):
                        a = arg[b, c, oy, ox]
                        dx[b, c, oy * stride + a // k, ox * stride + a % k] += dout[b, c, oy, ox]
    return dx_arr


def batchnorm_forward_train(double[:, :, :, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    """Training-mode batch norm; returns (out, xhat, mean, biased var, 1/std)."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3]
    cdef Py_ssize_t W = x.shape[3]
    out_arr = np.empty((B, C, x.shape[2], x.shape[3]), dtype=np.float64)
    xhat_arr = np.empty_like(out_arr)
    mean_arr = np.empty(C, dtype=np.float64)
    var_arr = np.empty(C, dtype=np.float64)
    inv_arr = np.empty(C, dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr, var = var_arr, inv = inv_arr
    cdef Py_ssize_t b, c, p
    cdef double s, d, m, iv, g, bt, n = <double>(B * HW)
    cdef const double* xp
    cdef double* op
    cdef double* hp
    with nogil:
        for c in range(C):
            s = 0.0
            for b in range(B):
                xp = &x[b, c, 0, 0]
                for p in range(HW):
                    s += xp[p]
            m = s / n
            s = 0.0
            for b in range(B):
                xp = &x[b, c, 0, 0]
                for p in range(HW):
                    d = xp[p] - m
                    s += d * d
            mean[c] = m
            var[c] = s / n
            iv = 1.0 / sqrt(var[c] + eps)
            inv[c] = iv
            g = gamma[c]
            bt = beta[c]
            for b in range(B):
                xp = &x[b, c, 0, 0]
                hp = &xhat[b, c, 0, 0]
                op = &out[b, c, 0, 0]
                for p in range(HW):
                    d = (xp[p] - m) * iv
                    hp[p] = d
                    op[p] = d * g + bt
    return out_arr, xhat_arr, mean_arr, var_arr, inv_arr


def batchnorm_backward_train(double[:, :, :, ::1] dout, double[:, :, :, ::1] xhat, double[::1] gamma, double[::1] inv):
    """Returns (dx, dgamma, dbeta) for training-mode batch norm."""
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], HW = dout.shape[2] * dout.shape[3]
    dx_arr = np.empty((B, C, dout.shape[2], dout.shape[3]), dtype=np.float64)
    dg_arr = np.empty(C, dtype=np.float64)
    db_arr = np.empty(C, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr, dbv = db_arr
    cdef Py_ssize_t b, c, p
    cdef double sd, sdx, k1, k2, n = <double>(B * HW)
    cdef const double* dp
    cdef const double* hp
    cdef double* op
    with nogil:
        for c in range(C):
            sd = 0.0
            sdx = 0.0
            for b in range(B):
                dp = &dout[b, c, 0, 0]
                hp = &xhat[b, c, 0, 0]
                for p in range(HW):
                    sd += dp[p]
                    sdx += dp[p] * hp[p]
            dg[c] = sdx
            dbv[c] = sd
            k1 = gamma[c] * inv[c]
            for b in range(B):
                dp = &dout[b, c, 0, 0]
                hp = &xhat[b, c, 0, 0]
                op = &dx[b, c, 0, 0]
                for p in range(HW):
                    op[p] = k1 * (dp[p] - sd / n - hp[p] * (sdx / n))
    return dx_arr, dg_arr, db_arr


def relu_forward(double[:, ::1] x):
    """ReLU over a 2-D contiguous view."""
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                out[i, j] = v if v > 0.0 else 0.0
    return out_arr


def relu_backward(double[:, ::1] dout, double[:, ::1] y):
    cdef Py_ssize_t n = dout.shape[0], m = dout.shape[1], i, j
    dx_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                dx[i, j] = dout[i, j] if y[i, j] > 0.0 else 0.0
    return dx_arr
