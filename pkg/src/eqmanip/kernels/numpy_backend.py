"""Pure-numpy implementations of the hot array kernels.

Layout conventions: images are (batch, channels, height, width), row 0 is the
top of the image, and plane coordinates map a pixel (i, j) to
x = j - c, y = c - i with c = (size - 1) / 2, so the image center is the
rotation fixed point.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, OH*OW) patches for cross-correlation."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kernel, stride, pad)
    ow = conv_out_size(w, kernel, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kernel} larger than padded input {h}x{w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kernel, kernel, oh, ow), dtype=x.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, :, ki, kj] = x[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return cols.reshape(b, c * kernel * kernel, oh * ow)


def col2im(
    cols: np.ndarray, shape: tuple, kernel: int, stride: int, pad: int
) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (B, C, H, W)."""
    b, c, h, w = shape
    oh = conv_out_size(h, kernel, stride, pad)
    ow = conv_out_size(w, kernel, stride, pad)
    cols = cols.reshape(b, c, kernel, kernel, oh, ow)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[:, :, ki, kj]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def maxpool2d(x: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping spatial max pool; returns (pooled, argmax indices into
    the flattened window) for the backward pass."""
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"pool size {size} does not divide {h}x{w}")
    oh, ow = h // size, w // size
    windows = x.reshape(b, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(b, c, oh, ow, size * size)
    arg = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return pooled, arg.astype(np.intp)


def maxpool2d_backward(grad: np.ndarray, arg: np.ndarray, size: int) -> np.ndarray:
    b, c, oh, ow = grad.shape
    flat = np.zeros((b, c, oh, ow, size * size), dtype=grad.dtype)
    np.put_along_axis(flat, arg[..., None], grad[..., None], axis=-1)
    windows = flat.reshape(b, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    return windows.reshape(b, c, oh * size, ow * size)


def bilinear_warp(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Sample x (..., H, W) at out[i,j] = x[inverse-mapped (i,j)] where the
    2x2 matrix maps plane coords of output pixels back to source plane
    coords; zero fill outside the grid."""
    h, w = x.shape[-2], x.shape[-1]
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = jj - cj
    py = ci - ii
    sx = matrix[0, 0] * px + matrix[0, 1] * py
    sy = matrix[1, 0] * px + matrix[1, 1] * py
    fj = sx + cj
    fi = ci - sy
    i0 = np.floor(fi).astype(np.intp)
    j0 = np.floor(fj).astype(np.intp)
    di = fi - i0
    dj = fj - j0
    out = np.zeros_like(x)
    lead = x.reshape(-1, h, w)
    res = out.reshape(-1, h, w)
    for oi, oj, wgt in (
        (i0, j0, (1 - di) * (1 - dj)),
        (i0, j0 + 1, (1 - di) * dj),
        (i0 + 1, j0, di * (1 - dj)),
        (i0 + 1, j0 + 1, di * dj),
    ):
        valid = (oi >= 0) & (oi < h) & (oj >= 0) & (oj < w)
        oi_c = np.clip(oi, 0, h - 1)
        oj_c = np.clip(oj, 0, w - 1)
        contrib = lead[:, oi_c, oj_c] * (wgt * valid)
        res += contrib
    return out
