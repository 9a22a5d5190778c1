# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for float64 NCHW tensors.

Same channel-major column layout and accumulation order as ``_fallback``,
so both backends return bit-identical arrays.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    out = np.empty((c * k * k, n * oh * ow), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t b, ci, ki, kj, i, j, row, r, hi, wi
    with nogil:
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    r = 0
                    for b in range(n):
                        for i in range(oh):
                            hi = i * stride + ki - pad
                            if hi < 0 or hi >= h:
                                for j in range(ow):
                                    cols[row, r] = 0.0
                                    r += 1
                                continue
                            for j in range(ow):
                                wi = j * stride + kj - pad
                                if 0 <= wi < w:
                                    cols[row, r] = x[b, ci, hi, wi]
                                else:
                                    cols[row, r] = 0.0
                                r += 1
    return out


def col2im(double[:, ::1] cols, tuple x_shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ci, ki, kj, i, j, hi, wi, row, r
    with nogil:
        for ki in range(k):
            for kj in range(k):
                for ci in range(c):
                    row = (ci * k + ki) * k + kj
                    for b in range(n):
                        for i in range(oh):
                            hi = i * stride + ki - pad
                            if hi < 0 or hi >= h:
                                continue
                            r = (b * oh + i) * ow
                            for j in range(ow):
                                wi = j * stride + kj - pad
                                if 0 <= wi < w:
                                    dx[b, ci, hi, wi] += cols[row, r + j]
    return out
