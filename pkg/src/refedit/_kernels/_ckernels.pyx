# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the fused row kernels in ``_fallback``.

Same signatures and semantics; row reductions run in C loops with no
temporaries, exponentials go through numpy's vectorized exp in place.
"""

import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport sqrt

cdef double GELU_C = 0.7978845608028654


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating mx, s
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            for j in range(m):
                out[i, j] = x[i, j] - mx
    # numpy's exp is SIMD-vectorized; scalar libm exp in the loop is slower.
    np.exp(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            s = 0
            for j in range(m):
                s = s + out[i, j]
            s = 1 / s
            for j in range(m):
                out[i, j] = out[i, j] * s
    return out_arr


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating dot
    with nogil:
        for i in range(n):
            dot = 0
            for j in range(m):
                dot = dot + y[i, j] * dy[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (dy[i, j] - dot)
    return out_arr


def layernorm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, m), dtype=dtype)
    mean_arr = np.empty(n, dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] mean = mean_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    with nogil:
        for i in range(n):
            mu = 0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0
            for j in range(m):
                d = x[i, j] - mu
                var += d * d
            var /= m
            r = 1.0 / sqrt(var + eps)
            mean[i] = <floating>mu
            rstd[i] = <floating>r
            for j in range(m):
                y[i, j] = <floating>((x[i, j] - mu) * r) * gamma[j] + beta[j]
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(floating[:, ::1] dy, floating[:, ::1] x, floating[::1] mean,
                  floating[::1] rstd, floating[::1] gamma):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, m), dtype=dtype)
    dgamma_arr = np.zeros(m, dtype=np.float64)
    dbeta_arr = np.zeros(m, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double s1, s2, xh, g, r
    with nogil:
        for i in range(n):
            r = rstd[i]
            s1 = 0
            s2 = 0
            for j in range(m):
                xh = (x[i, j] - mean[i]) * r
                g = dy[i, j] * gamma[j]
                s1 += g
                s2 += g * xh
                dgamma[j] += dy[i, j] * xh
                dbeta[j] += dy[i, j]
            for j in range(m):
                xh = (x[i, j] - mean[i]) * r
                g = dy[i, j] * gamma[j]
                dx[i, j] = <floating>(r / m * (m * g - s1 - xh * s2))
    return dx_arr, dgamma_arr.astype(dtype), dbeta_arr.astype(dtype)


def gelu_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating v
    cdef floating c2 = <floating>(2 * GELU_C)
    # 0.5 (1 + tanh z) == sigmoid(2 z), so the only transcendental is one exp,
    # done in a single vectorized numpy call between the two loops.
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                out[i, j] = -c2 * (v + <floating>0.044715 * v * v * v)
    with np.errstate(over="ignore"):
        np.exp(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = x[i, j] / (1 + out[i, j])
    return out_arr


def gelu_bwd(floating[:, ::1] x, floating[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, m), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating v, s, dinner
    cdef floating c = <floating>GELU_C
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                out[i, j] = -2 * c * (v + <floating>0.044715 * v * v * v)
    with np.errstate(over="ignore"):
        np.exp(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                s = 1 / (1 + out[i, j])
                dinner = c * (1 + 3 * <floating>0.044715 * v * v)
                out[i, j] = dy[i, j] * (s + 2 * v * s * (1 - s) * dinner)
    return out_arr
