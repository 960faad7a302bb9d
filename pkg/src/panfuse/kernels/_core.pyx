# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython core for the convolution hot path: im2col / col2im on float32.

Contracts mirror `_fallback.py`; col2im loops (ki, kj) outermost so float
accumulation order matches the numpy fallback bit for bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(cnp.ndarray x, int k):
    """Unfold valid k x k patches of (N, C, H, W) float32 into (N*OH*OW, C*k*k)."""
    cdef cnp.ndarray xf = np.ascontiguousarray(x, dtype=np.float32)
    cdef int n = xf.shape[0], c = xf.shape[1], h = xf.shape[2], w = xf.shape[3]
    cdef int oh = h - k + 1, ow = w - k + 1
    out_arr = np.empty((n * oh * ow, c * k * k), dtype=np.float32)

    cdef float[:, :, :, ::1] src = xf
    cdef float[:, ::1] dst = out_arr
    cdef Py_ssize_t ni, ci, i, j, ki, kj, row, col
    with nogil:
        for ni in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (ni * oh + i) * ow + j
                    col = 0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                dst[row, col] = src[ni, ci, i + ki, j + kj]
                                col += 1
    return out_arr


def col2im(cnp.ndarray cols, int n, int c, int h, int w, int k):
    """Adjoint of im2col: scatter-add (N*OH*OW, C*k*k) back onto (N, C, H, W)."""
    cdef int oh = h - k + 1, ow = w - k + 1
    if cols.shape[0] != n * oh * ow or cols.shape[1] != c * k * k:
        raise ValueError("col2im: cols shape (%d,%d) inconsistent with (%d,%d,%d,%d,k=%d)"
                         % (cols.shape[0], cols.shape[1], n, c, h, w, k))
    cdef cnp.ndarray cf = np.ascontiguousarray(cols, dtype=np.float32)
    out_arr = np.zeros((n, c, h, w), dtype=np.float32)

    cdef float[:, ::1] src = cf
    cdef float[:, :, :, ::1] dst = out_arr
    cdef Py_ssize_t ni, ci, i, j, ki, kj, row, col
    with nogil:
        for ki in range(k):
            for kj in range(k):
                for ni in range(n):
                    for ci in range(c):
                        col = (ci * k + ki) * k + kj
                        for i in range(oh):
                            row = (ni * oh + i) * ow
                            for j in range(ow):
                                dst[ni, ci, i + ki, j + kj] += src[row + j, col]
    return out_arr
