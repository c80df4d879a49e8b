# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels (layernorm, softmax) for the tensor core.

Mirrors the corresponding ``_kernels_py`` functions. The GELU forward
stays in numpy (its vectorised tanh beats a scalar libm loop); the backward,
which reuses the cached tanh, is compiled. Inputs are reshaped to (rows, n) and
processed row by row in a single pass without numpy temporaries.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)

def layernorm_forward(x, gamma, beta, double eps):
    shape = x.shape
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, shape[len(shape) - 1])
    cdef double[::1] gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], n = xv.shape[1], i, j
    y = np.empty(shape)
    xhat = np.empty(shape)
    rstd = np.empty(shape[:len(shape) - 1])
    cdef double[:, ::1] yv = y.reshape(rows, n)
    cdef double[:, ::1] hv = xhat.reshape(rows, n)
    cdef double[::1] rv = rstd.reshape(rows)
    cdef double mean, var, d, r
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(n):
                mean += xv[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = xv[i, j] - mean
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + eps)
            rv[i] = r
            for j in range(n):
                d = (xv[i, j] - mean) * r
                hv[i, j] = d
                yv[i, j] = d * gv[j] + bv[j]
    return y, xhat, rstd


def layernorm_backward(gy, xhat, rstd, gamma):
    shape = gy.shape
    cdef double[:, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1, shape[len(shape) - 1])
    cdef double[:, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64).reshape(-1, shape[len(shape) - 1])
    cdef double[::1] rv = np.ascontiguousarray(rstd, dtype=np.float64).reshape(-1)
    cdef double[::1] gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef Py_ssize_t rows = gyv.shape[0], n = gyv.shape[1], i, j
    gx = np.empty(shape)
    ggamma = np.zeros(n)
    gbeta = np.zeros(n)
    cdef double[:, ::1] gxv = gx.reshape(rows, n)
    cdef double[::1] ggv = ggamma
    cdef double[::1] gbv = gbeta
    cdef double s1, s2, gh
    with nogil:
        for i in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                ggv[j] += gyv[i, j] * hv[i, j]
                gbv[j] += gyv[i, j]
                gh = gyv[i, j] * gv[j]
                s1 += gh
                s2 += gh * hv[i, j]
            s1 /= n
            s2 /= n
            for j in range(n):
                gh = gyv[i, j] * gv[j]
                gxv[i, j] = (gh - s1 - hv[i, j] * s2) * rv[i]
    return gx, ggamma, gbeta


def softmax_forward(x):
    shape = x.shape
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, shape[len(shape) - 1])
    cdef Py_ssize_t rows = xv.shape[0], n = xv.shape[1], i, j
    y = np.empty(shape)
    cdef double[:, ::1] yv = y.reshape(rows, n)
    cdef double m, s, e
    with nogil:
        for i in range(rows):
            m = xv[i, 0]
            for j in range(1, n):
                if xv[i, j] > m:
                    m = xv[i, j]
            s = 0.0
            for j in range(n):
                e = exp(xv[i, j] - m)
                yv[i, j] = e
                s += e
            s = 1.0 / s
            for j in range(n):
                yv[i, j] *= s
    return y


def softmax_backward(y, gy):
    shape = y.shape
    cdef double[:, ::1] yv = np.ascontiguousarray(y, dtype=np.float64).reshape(-1, shape[len(shape) - 1])
    cdef double[:, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1, shape[len(shape) - 1])
    cdef Py_ssize_t rows = yv.shape[0], n = yv.shape[1], i, j
    gx = np.empty(shape)
    cdef double[:, ::1] gxv = gx.reshape(rows, n)
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += gyv[i, j] * yv[i, j]
            for j in range(n):
                gxv[i, j] = yv[i, j] * (gyv[i, j] - dot)
    return gx


def gelu_backward(x, t, gy):
    shape = x.shape
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef double[::1] tv = np.ascontiguousarray(t, dtype=np.float64).reshape(-1)
    cdef double[::1] gyv = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t size = xv.shape[0], i
    gx = np.empty(shape)
    cdef double[::1] gxv = gx.reshape(size)
    cdef double v, th
    with nogil:
        for i in range(size):
            v = xv[i]
            th = tv[i]
            gxv[i] = gyv[i] * (0.5 * (1.0 + th)
                               + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 0.134145 * v * v))
    return gx
