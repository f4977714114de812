"""Dense float64 tensors with reverse-mode differentiation.

A Tensor records the primitive application that produced it (parents plus a
backward closure); backward() topologically orders the recorded applications
reachable from the seed and accumulates cotangents.  Just enough surface for
the equivariant layers, the actor-critic losses, and Adam.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class UnknownNodeError(KeyError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def accumulate(self, g: np.ndarray):
        # never accumulate in place: the first contribution may alias an
        # array shared with another node's gradient
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self, seed=None):
        """Accumulate gradients of this node w.r.t. every recorded ancestor."""
        if not self.requires_grad:
            raise UnknownNodeError("backward() on a node outside the record")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar node")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(p for p in parents if p.requires_grad), backward=backward if req else None)


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), back)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), back)


def neg(a):
    a = as_tensor(a)

    def back(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), back)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), back)


# -- pointwise ----------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def back(g):
        a.accumulate(g * mask)

    return _make(a.data * mask, (a,), back)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def back(g):
        a.accumulate(g * (1.0 - out * out))

    return _make(out, (a,), back)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def back(g):
        a.accumulate(g * out)

    return _make(out, (a,), back)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    out = np.log(a.data)

    def back(g):
        a.accumulate(g / a.data)

    return _make(out, (a,), back)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def back(g):
        a.accumulate(g * 0.5 / out)

    return _make(out, (a,), back)


def softplus(a):
    """log(1 + exp(x)), computed stably."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        a.accumulate(g * sig)

    return _make(out, (a,), back)


def clip(a, lo=None, hi=None):
    """Clamp with zero gradient outside the active range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)

    def back(g):
        a.accumulate(g * mask)

    return _make(out, (a,), back)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        a.accumulate(out * (g - inner))

    return _make(out, (a,), back)


# -- reductions ---------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full(a.data.shape, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_(a, axis, keepdims=False):
    a = as_tensor(a)
    arg = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis)
    if not keepdims:
        out = out.squeeze(axis)

    def back(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(arg, axis), gg, axis=axis)
        a.accumulate(buf)

    return _make(out, (a,), back)


# -- structure ----------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)

    def back(g):
        a.accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def back(g):
        a.accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(piece)

    return _make(out, tuple(tensors), back)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a.accumulate(buf)

    return _make(a.data[idx], (a,), back)


def take(a, indices, axis):
    """np.take with a 1-D integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def back(g):
        buf = np.zeros_like(a.data)
        moved = np.moveaxis(buf, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        a.accumulate(buf)

    return _make(out, (a,), back)


def sparse_apply(mat, a):
    """Fixed scipy sparse operator on a flat vector: out = mat @ a."""
    a = as_tensor(a)
    out = mat @ a.data

    def back(g):
        a.accumulate(mat.T @ g)

    return _make(out, (a,), back)


# -- spatial ------------------------------------------------------------

def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of x:(B,C,H,W) with w:(O,C,k,k)."""
    from . import kernels

    x, w = as_tensor(x), as_tensor(w)
    b, c, h, width = x.data.shape
    o, c2, k, k2 = w.data.shape
    if c != c2 or k != k2:
        raise ValueError(f"conv shape mismatch: x {x.data.shape}, w {w.data.shape}")
    oh = kernels.conv_out_size(h, k, stride, pad)
    ow = kernels.conv_out_size(width, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {k} larger than padded {h}x{width} input")
    cols = kernels.im2col(x.data, k, stride, pad)  # (B, C*k*k, OH*OW)
    wmat = w.data.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(b, o, oh, ow)

    def back(g):
        gflat = g.reshape(b, o, oh * ow)
        if w.requires_grad:
            gw = np.einsum("bol,bcl->oc", gflat, cols, optimize=True)
            w.accumulate(gw.reshape(o, c, k, k))
        if x.requires_grad:
            gcols = np.einsum("oc,bol->bcl", wmat, gflat, optimize=True)
            x.accumulate(kernels.col2im(gcols, (b, c, h, width), k, stride, pad))

    return _make(out, (x, w), back)


def maxpool2d(x, size):
    from . import kernels

    x = as_tensor(x)
    pooled, arg = kernels.maxpool2d(x.data, size)

    def back(g):
        x.accumulate(kernels.maxpool2d_backward(g, arg, size))

    return _make(pooled, (x,), back)


# -- parameters and Adam ------------------------------------------------

class Parameter(Tensor):
    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad = None


def zero_grads(params):
    for p in params:
        p.zero_grad()


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction; skips gradient-less params."""
    for p in params:
        if p.grad is None:
            continue
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * (p.grad * p.grad)
        mhat = p.m / (1.0 - beta1**p.step)
        vhat = p.v / (1.0 - beta2**p.step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


# -- checkpoint io ------------------------------------------------------

_MAGIC = b"EQMT"


def save_checkpoint(path, named_arrays):
    """Write an ordered list of (name, float64 array) records."""
    items = list(named_arrays)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read records back as an ordered dict name -> array."""
    out = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out


def restore_into(named_params, saved):
    """Copy checkpoint arrays into parameters, verifying names and shapes."""
    for name, p in named_params:
        if name not in saved:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        arr = saved[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.data.shape}")
        p.data[...] = arr
