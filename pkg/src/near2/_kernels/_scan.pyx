# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scan kernels: prefix dot products and prefix norms over a float32
corpus matrix with float64 accumulation.

Each row is reduced by one sequential loop over its first m entries, so a
row's result depends only on its own data and m -- subsetting or reordering
rows can never change individual values.
"""

import numpy as np

from libc.stdint cimport int64_t


def prefix_dot_products(const float[:, :] matrix, const double[::1] query,
                        Py_ssize_t m, row_indices=None):
    """float64 dot of each (selected) row's first m entries with `query`."""
    cdef Py_ssize_t i, j, r, count
    cdef double acc
    cdef const int64_t[::1] idx

    if row_indices is None:
        count = matrix.shape[0]
        out = np.empty(count, dtype=np.float64)
        _dots_all(matrix, query, m, out)
        return out

    idx = np.ascontiguousarray(row_indices, dtype=np.int64)
    count = idx.shape[0]
    out = np.empty(count, dtype=np.float64)
    cdef double[::1] out_v = out
    for i in range(count):
        r = idx[i]
        acc = 0.0
        for j in range(m):
            acc += <double> matrix[r, j] * query[j]
        out_v[i] = acc
    return out


cdef void _dots_all(const float[:, :] matrix, const double[::1] query,
                    Py_ssize_t m, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(matrix.shape[0]):
        acc = 0.0
        for j in range(m):
            acc += <double> matrix[i, j] * query[j]
        out[i] = acc


def prefix_sq_norms(const float[:, :] matrix, Py_ssize_t m, row_indices=None):
    """float64 squared L2 norm of each (selected) row's first m entries."""
    cdef Py_ssize_t i, j, r, count
    cdef double acc, v
    cdef const int64_t[::1] idx

    if row_indices is None:
        count = matrix.shape[0]
        out = np.empty(count, dtype=np.float64)
        _sq_norms_all(matrix, m, out)
        return out

    idx = np.ascontiguousarray(row_indices, dtype=np.int64)
    count = idx.shape[0]
    out = np.empty(count, dtype=np.float64)
    cdef double[::1] out_v = out
    for i in range(count):
        r = idx[i]
        acc = 0.0
        for j in range(m):
            v = <double> matrix[r, j]
            acc += v * v
        out_v[i] = acc
    return out


cdef void _sq_norms_all(const float[:, :] matrix, Py_ssize_t m,
                        double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double acc, v
    for i in range(matrix.shape[0]):
        acc = 0.0
        for j in range(m):
            v = <double> matrix[i, j]
            acc += v * v
        out[i] = acc
