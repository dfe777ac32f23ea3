# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature and the same return values; ``rsnmt.kernels`` picks one at import.
Inputs are 2-D, C-contiguous, float32 or float64.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt

cnp.import_array()


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mean, var, r, v
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                v = x[i, j] - mean
                var += v * v
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <floating>r
            for j in range(d):
                v = (x[i, j] - mean) * r
                xhat[i, j] = <floating>v
                y[i, j] = <floating>(v * gain[j] + bias[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(floating[:, ::1] dy, floating[:, ::1] xhat, floating[::1] rstd, floating[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_acc = np.zeros(d, dtype=np.float64)
    dbias_acc = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_acc
    cdef double[::1] dbias = dbias_acc
    cdef double s1, s2, g
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = dy[i, j] * gain[j]
                s1 += g
                s2 += g * xhat[i, j]
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                g = dy[i, j] * gain[j]
                dx[i, j] = <floating>(rstd[i] * (g - s1 - xhat[i, j] * s2))
    return dx_arr, dgain_acc.astype(dtype), dbias_acc.astype(dtype)


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0
            for j in range(d):
                e = _exp(x[i, j] - m)
                y[i, j] = e
                s = s + e
            s = 1 / s
            for j in range(d):
                y[i, j] = y[i, j] * s
    return y_arr


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += y[i, j] * dy[i, j]
            for j in range(d):
                dx[i, j] = <floating>(y[i, j] * (dy[i, j] - dot))
    return dx_arr


def smoothed_ce(floating[:, ::1] logits, const long long[::1] gold, double epsilon, long long pad_id):
    """Returns (summed loss, non-pad count, per-row gradient p - q)."""
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    grad_arr = np.zeros((n, v), dtype=dtype)
    cdef floating[:, ::1] grad = grad_arr
    cdef floating m, e, s
    cdef double lse, off, on, total = 0.0, xsum
    cdef Py_ssize_t count = 0
    cdef long long g
    on = 1.0 - epsilon
    off = epsilon / (v - 1) if v > 1 else 0.0
    with nogil:
        for i in range(n):
            g = gold[i]
            if g == pad_id:
                continue
            count += 1
            m = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0
            xsum = 0.0
            for j in range(v):
                e = _exp(logits[i, j] - m)
                grad[i, j] = e
                s = s + e
                xsum += logits[i, j]
            lse = m + log(s)
            # -sum_j q_j log p_j with q = off everywhere except on at g
            total += off * (v * lse - xsum) + (on - off) * (lse - logits[i, g])
            s = 1 / s
            for j in range(v):
                grad[i, j] = grad[i, j] * s - <floating>off
            grad[i, g] = grad[i, g] - <floating>(on - off)
    return total, count, grad_arr


def scatter_add_rows(floating[:, ::1] out, const long long[::1] ids, floating[:, ::1] rows):
    cdef Py_ssize_t n = ids.shape[0], d = rows.shape[1], i, j
    cdef long long r
    with nogil:
        for i in range(n):
            r = ids[i]
            for j in range(d):
                out[r, j] += rows[i, j]
