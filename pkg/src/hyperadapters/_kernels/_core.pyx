# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled float32 kernels for the hot elementwise/reduction ops.

Each function mirrors a signature in `_numpy`; the dispatch layer in
`__init__.py` routes float32 contiguous arrays here and everything else
to the numpy fallback. Row reductions accumulate in double to keep the
two backends within float32 round-off of each other.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def relu_fwd(cnp.float32_t[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float32_t, ndim=1] out = np.empty(n, dtype=np.float32)
    cdef cnp.float32_t[::1] y = out
    cdef Py_ssize_t i
    for i in range(n):
        y[i] = x[i] if x[i] > 0.0 else 0.0
    return out


def relu_bwd(cnp.float32_t[::1] x, cnp.float32_t[::1] gy):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float32_t, ndim=1] out = np.empty(n, dtype=np.float32)
    cdef cnp.float32_t[::1] gx = out
    cdef Py_ssize_t i
    for i in range(n):
        gx[i] = gy[i] if x[i] > 0.0 else 0.0
    return out


def layer_norm_fwd(cnp.float32_t[:, ::1] x, cnp.float32_t[::1] gain,
                   cnp.float32_t[::1] bias, float eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] y_arr = np.empty((rows, d), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] mean_arr = np.empty(rows, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] rstd_arr = np.empty(rows, dtype=np.float32)
    cdef cnp.float32_t[:, ::1] y = y_arr
    cdef cnp.float32_t[::1] mean = mean_arr, rstd = rstd_arr
    cdef Py_ssize_t r, j
    cdef double acc, var, mu
    cdef float rs, m
    for r in range(rows):
        acc = 0.0
        for j in range(d):
            acc += x[r, j]
        mu = acc / d
        var = 0.0
        for j in range(d):
            var += (x[r, j] - mu) * (x[r, j] - mu)
        var /= d
        m = <float> mu
        rs = <float> (1.0 / sqrt(var + eps))
        mean[r] = m
        rstd[r] = rs
        for j in range(d):
            y[r, j] = (x[r, j] - m) * rs * gain[j] + bias[j]
    return y_arr, mean_arr, rstd_arr


def layer_norm_bwd(cnp.float32_t[:, ::1] x, cnp.float32_t[::1] mean,
                   cnp.float32_t[::1] rstd, cnp.float32_t[::1] gain,
                   cnp.float32_t[:, ::1] gy):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] gx_arr = np.empty((rows, d), dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] ggain_arr = np.zeros(d, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=1] gbias_arr = np.zeros(d, dtype=np.float32)
    cdef cnp.float32_t[:, ::1] gx = gx_arr
    cdef cnp.float32_t[::1] ggain = ggain_arr, gbias = gbias_arr
    cdef Py_ssize_t r, j
    cdef double s1, s2
    cdef float xhat, gyg, m1, m2
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xhat = (x[r, j] - mean[r]) * rstd[r]
            gyg = gy[r, j] * gain[j]
            s1 += gyg
            s2 += gyg * xhat
            ggain[j] += gy[r, j] * xhat
            gbias[j] += gy[r, j]
        m1 = <float> (s1 / d)
        m2 = <float> (s2 / d)
        for j in range(d):
            xhat = (x[r, j] - mean[r]) * rstd[r]
            gyg = gy[r, j] * gain[j]
            gx[r, j] = rstd[r] * (gyg - m1 - xhat * m2)
    return gx_arr, ggain_arr, gbias_arr


def softmax_fwd(cnp.float32_t[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] y_arr = np.empty((rows, d), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] y = y_arr
    cdef Py_ssize_t r, j
    cdef double s
    cdef float m
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, d):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(d):
            y[r, j] = <float> exp(x[r, j] - m)
            s += y[r, j]
        for j in range(d):
            y[r, j] = <float> (y[r, j] / s)
    return y_arr


def softmax_bwd(cnp.float32_t[:, ::1] y, cnp.float32_t[:, ::1] gy):
    cdef Py_ssize_t rows = y.shape[0], d = y.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] gx_arr = np.empty((rows, d), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] gx = gx_arr
    cdef Py_ssize_t r, j
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for j in range(d):
            dot += gy[r, j] * y[r, j]
        for j in range(d):
            gx[r, j] = (gy[r, j] - <float> dot) * y[r, j]
    return gx_arr


def cross_entropy_fwd(cnp.float32_t[:, ::1] logits, cnp.int64_t[::1] targets,
                      long long ignore_id):
    cdef Py_ssize_t rows = logits.shape[0], v = logits.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] p_arr = np.empty((rows, v), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] p = p_arr
    cdef Py_ssize_t r, j
    cdef long long n_kept = 0
    cdef double s, loss = 0.0
    cdef float m
    for r in range(rows):
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        s = 0.0
        for j in range(v):
            p[r, j] = <float> exp(logits[r, j] - m)
            s += p[r, j]
        for j in range(v):
            p[r, j] = <float> (p[r, j] / s)
        if targets[r] != ignore_id:
            n_kept += 1
            loss -= (logits[r, targets[r]] - m) - log(s)
    if n_kept == 0:
        return np.float32(0.0), p_arr, 0
    return np.float32(loss / n_kept), p_arr, int(n_kept)


def cross_entropy_bwd(cnp.float32_t[:, ::1] probs, cnp.int64_t[::1] targets,
                      long long ignore_id, long long n_kept, float gloss):
    cdef Py_ssize_t rows = probs.shape[0], v = probs.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] g_arr = np.zeros((rows, v), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] g = g_arr
    cdef Py_ssize_t r, j
    cdef float scale
    if n_kept == 0:
        return g_arr
    scale = gloss / n_kept
    for r in range(rows):
        if targets[r] == ignore_id:
            continue
        for j in range(v):
            g[r, j] = probs[r, j] * scale
        g[r, targets[r]] -= scale
    return g_arr
