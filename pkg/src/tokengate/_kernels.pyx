# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled policy forward kernels.

Same arithmetic order as ``_kernels_py``: sparse first layer accumulated in
feature order, dense second layer, max-shifted log-softmax.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp, log

cnp.import_array()


cdef void _row(const double[:, ::1] W1, const double[::1] b1,
               const double[:, ::1] W2, const double[::1] b2,
               const double[::1] x, double[::1] hid,
               double[::1] out_lp, double* out_h) noexcept nogil:
    cdef Py_ssize_t H = W1.shape[0], F = W1.shape[1], V = W2.shape[0]
    cdef Py_ssize_t i, j, v
    cdef double xj, acc, m, s, lp, p, h
    for i in range(H):
        hid[i] = b1[i]
    for j in range(F):
        xj = x[j]
        if xj != 0.0:
            for i in range(H):
                hid[i] += W1[i, j] * xj
    for i in range(H):
        hid[i] = tanh(hid[i])
    m = -1e308
    for v in range(V):
        acc = b2[v]
        for i in range(H):
            acc += W2[v, i] * hid[i]
        out_lp[v] = acc
        if acc > m:
            m = acc
    s = 0.0
    for v in range(V):
        s += exp(out_lp[v] - m)
    s = log(s)
    h = 0.0
    for v in range(V):
        lp = out_lp[v] - m - s
        out_lp[v] = lp
        p = exp(lp)
        if p >= 1e-300:
            h -= p * lp
    if h < 0.0:
        h = 0.0
    out_h[0] = h


def token_logprobs(W1, b1, W2, b2, x):
    """Log-probabilities over the vocabulary and entropy for one feature row."""
    cdef const double[:, ::1] w1 = W1
    cdef const double[::1] bb1 = b1
    cdef const double[:, ::1] w2 = W2
    cdef const double[::1] bb2 = b2
    cdef const double[::1] xv = x
    cdef double[::1] hid = np.empty(W1.shape[0])
    out = np.empty(W2.shape[0])
    cdef double[::1] lp = out
    cdef double h
    _row(w1, bb1, w2, bb2, xv, hid, lp, &h)
    return out, h


def rows_logprobs(W1, b1, W2, b2, X):
    """Full log-prob matrix and entropies for every row of X."""
    cdef const double[:, ::1] w1 = W1
    cdef const double[::1] bb1 = b1
    cdef const double[:, ::1] w2 = W2
    cdef const double[::1] bb2 = b2
    cdef const double[:, ::1] xm = X
    cdef Py_ssize_t T = X.shape[0], t
    cdef double[::1] hid = np.empty(W1.shape[0])
    out = np.empty((T, W2.shape[0]))
    ent = np.empty(T)
    cdef double[:, ::1] lp = out
    cdef double[::1] hv = ent
    cdef double h
    with nogil:
        for t in range(T):
            _row(w1, bb1, w2, bb2, xm[t], hid, lp[t], &h)
            hv[t] = h
    return out, ent
