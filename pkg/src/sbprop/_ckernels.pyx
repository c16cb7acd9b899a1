# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot elementary kernels.

Semantics match ``sbprop._pykernels`` (the NumPy reference backend): plain C
loops over C-contiguous float64 buffers, deterministic summation order.
"""

import numpy as np

from libc.math cimport erf, exp, sqrt

DEF INV_SQRT2 = 0.7071067811865476
DEF INV_SQRT_2PI = 0.3989422804014327


def _as_c_f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b, bint transpose_b=False):
    """Stacked matrix product over the last two axes (see _pykernels.matmul)."""
    a = _as_c_f64(a)
    b = _as_c_f64(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")

    ashape = tuple(a.shape)
    bshape = tuple(b.shape)
    a_lead = ashape[: len(ashape) - 2]
    b_lead = bshape[: len(bshape) - 2]
    if a_lead and b_lead and a_lead != b_lead:
        raise ValueError(f"mismatched stack dimensions: {a_lead} vs {b_lead}")
    lead = a_lead if a_lead else b_lead

    cdef Py_ssize_t m = ashape[len(ashape) - 2]
    cdef Py_ssize_t k = ashape[len(ashape) - 1]
    cdef Py_ssize_t b_rows = bshape[len(bshape) - 2]
    cdef Py_ssize_t b_cols = bshape[len(bshape) - 1]
    cdef Py_ssize_t kb, p
    if transpose_b:
        p = b_rows
        kb = b_cols
    else:
        kb = b_rows
        p = b_cols
    if k != kb:
        raise ValueError(f"inner dimensions disagree: {k} vs {kb}")

    cdef Py_ssize_t nbatch = 1
    for s in lead:
        nbatch *= s

    out = np.empty((nbatch, m, p), dtype=np.float64)
    cdef double[:, :, ::1] av = a.reshape((-1, m, k))
    cdef double[:, :, ::1] bv = b.reshape((-1, b_rows, b_cols))
    cdef double[:, :, ::1] ov = out
    cdef bint a_rep = av.shape[0] != nbatch
    cdef bint b_rep = bv.shape[0] != nbatch

    cdef Py_ssize_t t, i, j, q, ta, tb
    cdef double acc
    with nogil:
        for t in range(nbatch):
            ta = 0 if a_rep else t
            tb = 0 if b_rep else t
            if transpose_b:
                for i in range(m):
                    for j in range(p):
                        acc = 0.0
                        for q in range(k):
                            acc += av[ta, i, q] * bv[tb, j, q]
                        ov[t, i, j] = acc
            else:
                for i in range(m):
                    for j in range(p):
                        ov[t, i, j] = 0.0
                    for q in range(k):
                        acc = av[ta, i, q]
                        for j in range(p):
                            ov[t, i, j] += acc * bv[tb, q, j]

    return out.reshape(lead + (m, p))


def add(a, b):
    a = _as_c_f64(a)
    b = _as_c_f64(b)
    if a.shape != b.shape:
        raise ValueError("add operands must have identical shapes")
    out = np.empty_like(a)
    cdef double[::1] x = a.ravel()
    cdef double[::1] y = b.ravel()
    cdef double[::1] o = out.ravel()
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            o[i] = x[i] + y[i]
    return out


def mul(a, b):
    a = _as_c_f64(a)
    b = _as_c_f64(b)
    if a.shape != b.shape:
        raise ValueError("mul operands must have identical shapes")
    out = np.empty_like(a)
    cdef double[::1] x = a.ravel()
    cdef double[::1] y = b.ravel()
    cdef double[::1] o = out.ravel()
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            o[i] = x[i] * y[i]
    return out


def scale(x, double c):
    x = _as_c_f64(x)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] * c
    return out


def relu(x):
    x = _as_c_f64(x)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] if xv[i] > 0.0 else 0.0
    return out


def relu_vjp(x, dy):
    x = _as_c_f64(x)
    dy = _as_c_f64(dy)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] dv = dy.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = dv[i] if xv[i] > 0.0 else 0.0
    return out


def gelu(x):
    x = _as_c_f64(x)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = 0.5 * xv[i] * (1.0 + erf(xv[i] * INV_SQRT2))
    return out


def gelu_vjp(x, dy):
    x = _as_c_f64(x)
    dy = _as_c_f64(dy)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] dv = dy.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double cdf, pdf
    with nogil:
        for i in range(n):
            cdf = 0.5 * (1.0 + erf(xv[i] * INV_SQRT2))
            pdf = INV_SQRT_2PI * exp(-0.5 * xv[i] * xv[i])
            ov[i] = dv[i] * (cdf + xv[i] * pdf)
    return out


def softmax_lastdim(x):
    x = _as_c_f64(x)
    shape = x.shape
    cdef Py_ssize_t c = shape[len(shape) - 1]
    x2 = x.reshape((-1, c))
    out = np.empty_like(x2)
    cdef double[:, ::1] xv = x2
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, rows = xv.shape[0]
    cdef double hi, s
    with nogil:
        for i in range(rows):
            hi = xv[i, 0]
            for j in range(1, c):
                if xv[i, j] > hi:
                    hi = xv[i, j]
            s = 0.0
            for j in range(c):
                ov[i, j] = exp(xv[i, j] - hi)
                s += ov[i, j]
            for j in range(c):
                ov[i, j] /= s
    return out.reshape(shape)


def softmax_vjp(p, dy):
    p = _as_c_f64(p)
    dy = _as_c_f64(dy)
    shape = p.shape
    cdef Py_ssize_t c = shape[len(shape) - 1]
    p2 = p.reshape((-1, c))
    d2 = dy.reshape((-1, c))
    out = np.empty_like(p2)
    cdef double[:, ::1] pv = p2
    cdef double[:, ::1] dv = d2
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, rows = pv.shape[0]
    cdef double inner
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(c):
                inner += dv[i, j] * pv[i, j]
            for j in range(c):
                ov[i, j] = pv[i, j] * (dv[i, j] - inner)
    return out.reshape(shape)


def layer_norm(x, gamma, beta, double eps):
    x = _as_c_f64(x)
    gamma = _as_c_f64(gamma)
    beta = _as_c_f64(beta)
    shape = x.shape
    cdef Py_ssize_t c = shape[len(shape) - 1]
    x2 = x.reshape((-1, c))
    out = np.empty_like(x2)
    cdef double[:, ::1] xv = x2
    cdef double[::1] gv = gamma.ravel()
    cdef double[::1] bv = beta.ravel()
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, rows = xv.shape[0]
    cdef double mean, var, rstd, d
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(c):
                mean += xv[i, j]
            mean /= c
            var = 0.0
            for j in range(c):
                d = xv[i, j] - mean
                var += d * d
            var /= c
            rstd = 1.0 / sqrt(var + eps)
            for j in range(c):
                ov[i, j] = (xv[i, j] - mean) * rstd * gv[j] + bv[j]
    return out.reshape(shape)


def layer_norm_vjp(x, gamma, double eps, dy):
    x = _as_c_f64(x)
    gamma = _as_c_f64(gamma)
    dy = _as_c_f64(dy)
    shape = x.shape
    cdef Py_ssize_t c = shape[len(shape) - 1]
    x2 = x.reshape((-1, c))
    d2 = dy.reshape((-1, c))
    dx = np.empty_like(x2)
    dgamma = np.zeros(c, dtype=np.float64)
    dbeta = np.zeros(c, dtype=np.float64)
    cdef double[:, ::1] xv = x2
    cdef double[:, ::1] dv = d2
    cdef double[:, ::1] dxv = dx
    cdef double[::1] gv = gamma.ravel()
    cdef double[::1] dgv = dgamma
    cdef double[::1] dbv = dbeta
    cdef Py_ssize_t i, j, rows = xv.shape[0]
    cdef double mean, var, rstd, d, xhat, dxhat, m1, m2
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(c):
                mean += xv[i, j]
            mean /= c
            var = 0.0
            for j in range(c):
                d = xv[i, j] - mean
                var += d * d
            var /= c
            rstd = 1.0 / sqrt(var + eps)
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                xhat = (xv[i, j] - mean) * rstd
                dxhat = dv[i, j] * gv[j]
                m1 += dxhat
                m2 += dxhat * xhat
                dgv[j] += dv[i, j] * xhat
                dbv[j] += dv[i, j]
            m1 /= c
            m2 /= c
            for j in range(c):
                xhat = (xv[i, j] - mean) * rstd
                dxhat = dv[i, j] * gv[j]
                dxv[i, j] = rstd * (dxhat - m1 - xhat * m2)
    return dx.reshape(shape), dgamma, dbeta
