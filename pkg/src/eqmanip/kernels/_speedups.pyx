# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the patch-extraction / scatter kernels that dominate
conv and pooling time on the CPU."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def im2col(double[:, :, :, ::1] x, int kernel, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kernel) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("kernel larger than padded input")
    out_arr = np.zeros((b, c * kernel * kernel, oh * ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, ii, jj, row
    for bi in range(b):
        for ci in range(c):
            for ki in range(kernel):
                for kj in range(kernel):
                    row = (ci * kernel + ki) * kernel + kj
                    for oi in range(oh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(ow):
                            jj = oj * stride + kj - pad
                            if 0 <= jj < w:
                                out[bi, row, oi * ow + oj] = x[bi, ci, ii, jj]
    return out_arr


def col2im(double[:, :, ::1] cols, shape, int kernel, int stride, int pad):
    cdef Py_ssize_t b = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kernel) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kernel) // stride + 1
    out_arr = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, ki, kj, oi, oj, ii, jj, row
    for bi in range(b):
        for ci in range(c):
            for ki in range(kernel):
                for kj in range(kernel):
                    row = (ci * kernel + ki) * kernel + kj
                    for oi in range(oh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(ow):
                            jj = oj * stride + kj - pad
                            if 0 <= jj < w:
                                out[bi, ci, ii, jj] += cols[bi, row, oi * ow + oj]
    return out_arr


def maxpool2d(double[:, :, :, ::1] x, int size):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    if h % size or w % size:
        raise ValueError("pool size does not divide input")
    cdef Py_ssize_t oh = h // size, ow = w // size
    pooled_arr = np.empty((b, c, oh, ow), dtype=np.float64)
    arg_arr = np.empty((b, c, oh, ow), dtype=np.intp)
    cdef double[:, :, :, ::1] pooled = pooled_arr
    cdef Py_ssize_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t bi, ci, oi, oj, di, dj, best_k
    cdef double v, best
    for bi in range(b):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    best = x[bi, ci, oi * size, oj * size]
                    best_k = 0
                    for di in range(size):
                        for dj in range(size):
                            v = x[bi, ci, oi * size + di, oj * size + dj]
                            if v > best:
                                best = v
                                best_k = di * size + dj
                    pooled[bi, ci, oi, oj] = best
                    arg[bi, ci, oi, oj] = best_k
    return pooled_arr, arg_arr


def maxpool2d_backward(double[:, :, :, ::1] grad, Py_ssize_t[:, :, :, ::1] arg, int size):
    cdef Py_ssize_t b = grad.shape[0], c = grad.shape[1], oh = grad.shape[2], ow = grad.shape[3]
    out_arr = np.zeros((b, c, oh * size, ow * size), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, oi, oj, k
    for bi in range(b):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    k = arg[bi, ci, oi, oj]
                    out[bi, ci, oi * size + k // size, oj * size + k % size] += grad[bi, ci, oi, oj]
    return out_arr


def bilinear_warp(double[:, :, ::1] x, double[:, ::1] matrix):
    """x is (N, H, W) with leading axes pre-flattened by the wrapper."""
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef double ci = (h - 1) / 2.0, cj = (w - 1) / 2.0
    out_arr = np.zeros((n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double m00 = matrix[0, 0], m01 = matrix[0, 1], m10 = matrix[1, 0], m11 = matrix[1, 1]
    cdef Py_ssize_t ni, i, j, i0, j0
    cdef double px, py, sx, sy, fi, fj, di, dj, acc, w00, w01, w10, w11
    for i in range(h):
        for j in range(w):
            px = j - cj
            py = ci - i
            sx = m00 * px + m01 * py
            sy = m10 * px + m11 * py
            fj = sx + cj
            fi = ci - sy
            i0 = <Py_ssize_t>floor(fi)
            j0 = <Py_ssize_t>floor(fj)
            di = fi - i0
            dj = fj - j0
            w00 = (1 - di) * (1 - dj)
            w01 = (1 - di) * dj
            w10 = di * (1 - dj)
            w11 = di * dj
            for ni in range(n):
                acc = 0.0
                if 0 <= i0 < h and 0 <= j0 < w:
                    acc += x[ni, i0, j0] * w00
                if 0 <= i0 < h and 0 <= j0 + 1 < w:
                    acc += x[ni, i0, j0 + 1] * w01
                if 0 <= i0 + 1 < h and 0 <= j0 < w:
                    acc += x[ni, i0 + 1, j0] * w10
                if 0 <= i0 + 1 < h and 0 <= j0 + 1 < w:
                    acc += x[ni, i0 + 1, j0 + 1] * w11
                out[ni, i, j] = acc
    return out_arr
