# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row/elementwise kernels; see ``_kernels_py`` for the reference versions."""

import numpy as np
from libc.math cimport exp, fabs, log, sqrt

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


# exp(-|z|) <= 1 never overflows, so no inf appears even under fast-math
cdef inline double _sig(double z) noexcept nogil:
    cdef double e = exp(-fabs(z))
    return 1.0 / (1.0 + e) if z >= 0 else e / (1.0 + e)


# 0.5 * (1 + tanh(u)) == sigmoid(2u); one exp is much cheaper than libm tanh
def gelu_forward(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            o[i] = v * _sig(2.0 * GELU_C * (v + GELU_A * v * v * v))
    return out


def gelu_backward(const double[::1] x, const double[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double v, s, du
    with nogil:
        for i in range(n):
            v = x[i]
            s = _sig(2.0 * GELU_C * (v + GELU_A * v * v * v))
            du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            o[i] = gy[i] * (s + 2.0 * v * s * (1.0 - s) * du)
    return out


def sigmoid_forward(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _sig(x[i])
    return out


cdef inline double _row_lse(const double[:, ::1] x, Py_ssize_t r) noexcept nogil:
    cdef Py_ssize_t j, n = x.shape[1]
    cdef double m = x[r, 0], s = 0.0
    for j in range(1, n):
        if x[r, j] > m:
            m = x[r, j]
    for j in range(n):
        s += exp(x[r, j] - m)
    return m + log(s)


def logsumexp_rows(const double[:, ::1] x):
    cdef Py_ssize_t r, m = x.shape[0]
    out = np.empty(m)
    cdef double[::1] o = out
    with nogil:
        for r in range(m):
            o[r] = _row_lse(x, r)
    return out


def log_softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t r, j, m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef double lse
    with nogil:
        for r in range(m):
            lse = _row_lse(x, r)
            for j in range(n):
                o[r, j] = x[r, j] - lse
    return out


def log_softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t r, j, m = y.shape[0], n = y.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef double s
    with nogil:
        for r in range(m):
            s = 0.0
            for j in range(n):
                s += gy[r, j]
            for j in range(n):
                o[r, j] = gy[r, j] - exp(y[r, j]) * s
    return out


def l2_normalize_rows(const double[:, ::1] x):
    cdef Py_ssize_t r, j, m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    norms = np.empty(m)
    cdef double[:, ::1] o = out
    cdef double[::1] nv = norms
    cdef double s, inv
    with nogil:
        for r in range(m):
            s = 0.0
            for j in range(n):
                s += x[r, j] * x[r, j]
            s = sqrt(s)
            nv[r] = s
            inv = 1.0 / s if s > 0.0 else 1.0
            for j in range(n):
                o[r, j] = x[r, j] * inv
    return out, norms


def l2_normalize_rows_backward(const double[:, ::1] y, const double[::1] norms,
                               const double[:, ::1] gy):
    cdef Py_ssize_t r, j, m = y.shape[0], n = y.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef double d
    with nogil:
        for r in range(m):
            d = 0.0
            for j in range(n):
                d += gy[r, j] * y[r, j]
            for j in range(n):
                o[r, j] = (gy[r, j] - y[r, j] * d) / norms[r]
    return out
