# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: fused elementwise/row-wise loops over float64.

Mirrors ``fallback.py`` signature-for-signature. Single-threaded and
deterministic: every reduction runs left-to-right.
"""

from libc.math cimport exp, sqrt, tanh, pow

import numpy as np

NAME = "compiled"

cdef double GELU_C = sqrt(2.0 / 3.141592653589793)
cdef double GELU_A = 0.044715


def gelu_fwd(object x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] yf = out.ravel()
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, inner
    for i in range(n):
        v = xf[i]
        inner = GELU_C * (v + GELU_A * v * v * v)
        yf[i] = 0.5 * v * (1.0 + tanh(inner))
    return out


def gelu_bwd(object x, object gy):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] gf = gy.ravel()
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, inner, t, dinner
    for i in range(n):
        v = xf[i]
        inner = GELU_C * (v + GELU_A * v * v * v)
        t = tanh(inner)
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        of[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out


def softmax_rows_fwd(object x, object keep=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] yv = out
    cdef unsigned char[:, ::1] kv
    cdef Py_ssize_t r, c, rows = xv.shape[0], cols = xv.shape[1]
    cdef double m, s, e
    cdef bint masked = keep is not None
    if masked:
        kv = np.ascontiguousarray(keep, dtype=np.uint8)
    for r in range(rows):
        m = -1.7976931348623157e308
        for c in range(cols):
            if (not masked or kv[r, c]) and xv[r, c] > m:
                m = xv[r, c]
        s = 0.0
        for c in range(cols):
            if masked and not kv[r, c]:
                yv[r, c] = 0.0
            else:
                e = exp(xv[r, c] - m)
                yv[r, c] = e
                s += e
        for c in range(cols):
            yv[r, c] /= s
    return out


def softmax_rows_bwd(object y, object gy):
    y = np.ascontiguousarray(y, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    out = np.empty_like(y)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = gy
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, c, rows = yv.shape[0], cols = yv.shape[1]
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += yv[r, c] * gv[r, c]
        for c in range(cols):
            ov[r, c] = yv[r, c] * (gv[r, c] - dot)
    return out


def layernorm_rows_fwd(object x, object gamma, object beta, double eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    out = np.empty_like(x)
    mean = np.empty(rows, dtype=np.float64)
    rstd = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] yv = out
    cdef double[::1] gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(beta, dtype=np.float64)
    cdef double[::1] mv = mean
    cdef double[::1] rv = rstd
    cdef Py_ssize_t r, c
    cdef double mu, var, d, rs
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += xv[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = xv[r, c] - mu
            var += d * d
        var /= cols
        rs = 1.0 / sqrt(var + eps)
        mv[r] = mu
        rv[r] = rs
        for c in range(cols):
            yv[r, c] = (xv[r, c] - mu) * rs * gv[c] + bv[c]
    return out, mean, rstd


def layernorm_rows_bwd(object gy, object x, object gamma, object mean, object rstd):
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1]
    gx = np.empty_like(x)
    dgamma = np.zeros(cols, dtype=np.float64)
    dbeta = np.zeros(cols, dtype=np.float64)
    cdef double[:, ::1] gv = gy
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] ov = gx
    cdef double[::1] gammav = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef double[::1] mv = np.ascontiguousarray(mean, dtype=np.float64)
    cdef double[::1] rv = np.ascontiguousarray(rstd, dtype=np.float64)
    cdef double[::1] dgv = dgamma
    cdef double[::1] dbv = dbeta
    cdef Py_ssize_t r, c
    cdef double xhat, gxhat, m1, m2
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            xhat = (xv[r, c] - mv[r]) * rv[r]
            gxhat = gv[r, c] * gammav[c]
            dgv[c] += gv[r, c] * xhat
            dbv[c] += gv[r, c]
            m1 += gxhat
            m2 += gxhat * xhat
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            xhat = (xv[r, c] - mv[r]) * rv[r]
            gxhat = gv[r, c] * gammav[c]
            ov[r, c] = rv[r] * (gxhat - m1 - xhat * m2)
    return gx, dgamma, dbeta


def adam_update(object p, object g, object m, object v,
                double lr, double beta1, double beta2, double eps, long step):
    cdef double[::1] pv = p
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] mv = m
    cdef double[::1] vv = v
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double c1 = 1.0 - pow(beta1, step)
    cdef double c2 = 1.0 - pow(beta2, step)
    cdef double gi, mhat, vhat
    for i in range(n):
        gi = gv[i]
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gi
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * gi * gi
        mhat = mv[i] / c1
        vhat = vv[i] / c2
        pv[i] -= lr * mhat / (sqrt(vhat) + eps)
