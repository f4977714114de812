"""Thin wrapper presenting the Cython kernels with the numpy-backend API."""
from __future__ import annotations

import numpy as np

from . import _speedups
from .numpy_backend import conv_out_size  # noqa: F401

NAME = "compiled"


def _c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def im2col(x, kernel, stride, pad):
    return _speedups.im2col(_c64(x), kernel, stride, pad)


def col2im(cols, shape, kernel, stride, pad):
    return _speedups.col2im(_c64(cols), tuple(shape), kernel, stride, pad)


def maxpool2d(x, size):
    return _speedups.maxpool2d(_c64(x), size)


def maxpool2d_backward(grad, arg, size):
    return _speedups.maxpool2d_backward(_c64(grad), np.ascontiguousarray(arg, dtype=np.intp), size)


def bilinear_warp(x, matrix):
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-2]
    flat = _c64(x.reshape(-1, x.shape[-2], x.shape[-1]))
    out = _speedups.bilinear_warp(flat, _c64(matrix))
    return out.reshape(*lead, x.shape[-2], x.shape[-1])
