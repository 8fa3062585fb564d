# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: patch unfolding for convolution and popcount Hamming.

Loop and accumulation order match ``_pykernels`` so results are bit-identical.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()


cdef extern from *:
    int popcount64 "__builtin_popcountll"(unsigned long long) nogil


def im2col(x, int k, int stride, int padding):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c * k * k, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t b, ch, ki, kj, yi, xi, row, y, xx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for yi in range(oh):
                            y = yi * stride + ki - padding
                            if y < 0 or y >= h:
                                continue
                            for xi in range(ow):
                                xx = xi * stride + kj - padding
                                if xx < 0 or xx >= w:
                                    continue
                                ov[b, row, yi * ow + xi] = xv[b, ch, y, xx]
    return out


def col2im(cols, shape, int k, int stride, int padding):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * padding - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * padding - k) // stride + 1
    cdef const double[:, :, ::1] cv = np.ascontiguousarray(
        cols, dtype=np.float64).reshape(n, c * k * k, oh * ow)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, ch, ki, kj, yi, xi, row, y, xx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for yi in range(oh):
                            y = yi * stride + ki - padding
                            if y < 0 or y >= h:
                                continue
                            for xi in range(ow):
                                xx = xi * stride + kj - padding
                                if xx < 0 or xx >= w:
                                    continue
                                ov[b, ch, y, xx] += cv[b, row, yi * ow + xi]
    return out


def hamming_matrix(a, b):
    cdef const uint64_t[:, ::1] av = np.ascontiguousarray(a, dtype=np.uint64)
    cdef const uint64_t[:, ::1] bv = np.ascontiguousarray(b, dtype=np.uint64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], words = av.shape[1]
    if bv.shape[1] != words:
        raise ValueError("word counts differ: %d vs %d" % (words, bv.shape[1]))
    out = np.zeros((n, m), dtype=np.int64)
    cdef int64_t[:, ::1] ov = out
    cdef Py_ssize_t i, j, t
    cdef int64_t acc
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0
                for t in range(words):
                    acc += popcount64(av[i, t] ^ bv[j, t])
                ov[i, j] = acc
    return out
