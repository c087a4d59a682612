# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def masked_softmax_forward(double[:, ::1] scores, cnp.npy_bool[:, ::1] mask):
    cdef Py_ssize_t n = scores.shape[0], m = scores.shape[1], i, j
    cdef double mx, s, e
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            if mask[i, j] and scores[i, j] > mx:
                mx = scores[i, j]
        if mx == -INFINITY:
            continue
        s = 0.0
        for j in range(m):
            if mask[i, j]:
                e = exp(scores[i, j] - mx)
                out[i, j] = e
                s += e
        for j in range(m):
            out[i, j] = out[i, j] / s
    return out_arr


def masked_softmax_backward(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += y[i, j] * g[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out_arr


def scatter_add_rows(double[:, ::1] target, cnp.int64_t[::1] idx,
                     double[:, ::1] src, bint skip_zero):
    cdef Py_ssize_t n = idx.shape[0], d = src.shape[1], i, j
    cdef cnp.int64_t r
    for i in range(n):
        r = idx[i]
        if skip_zero and r == 0:
            continue
        for j in range(d):
            target[r, j] += src[i, j]
