"""Equivariant neural layers over the dihedral groups.

Linear layers store dense weights that are re-projected onto the intertwiner
subspace after every optimizer step; convolutions store one free kernel slice
per orbit and materialize the constrained kernel on the fly, so their
parameters never leave the subspace.  Spatial transforms are exact index
permutations for elements whose rotation is a multiple of 90 degrees and
bilinear interpolation otherwise.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from . import kernels
from .symgroup import (
    DihedralElement,
    FeatureType,
    RepKind,
    apply_channel_action,
    elements,
    ftype,
    intertwiner_dof,
    invariant_dof,
    inverse,
    project_intertwiner,
    project_invariant_vector,
    regular_type,
    rep_matrix,
    trivial_type,
)


class FeatureTypeError(TypeError):
    pass


# -- geometric tensors ----------------------------------------------------

class GeometricTensor:
    """A diffcore Tensor tagged with how the group acts on its channels.

    Vector form: channels on the last axis, any leading axes.
    Spatial form: (batch, channels, height, width).
    """

    def __init__(self, tensor, ft: FeatureType, spatial: bool = False):
        self.tensor = dc.as_tensor(tensor)
        self.ftype = ft
        self.spatial = spatial
        axis = 1 if spatial else -1
        if self.tensor.shape[axis] != ft.dim:
            raise FeatureTypeError(
                f"channel extent {self.tensor.shape[axis]} != {ft.dim} of {ft}"
            )
        if spatial and self.tensor.ndim != 4:
            raise FeatureTypeError("spatial tensors must be (B, C, H, W)")

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self):
        return self.tensor.shape

    def detach(self) -> "GeometricTensor":
        return GeometricTensor(self.tensor.detach(), self.ftype, self.spatial)


def spatial_transform(g: DihedralElement, arr: np.ndarray) -> np.ndarray:
    """Act on the last two axes of arr by g about the grid center: exact index
    permutation for 90-degree multiples, bilinear interpolation otherwise."""
    if arr.shape[-1] != arr.shape[-2]:
        raise ValueError(f"spatial transform needs a square grid, got {arr.shape[-2:]}")
    if g.is_exact_pixel():
        out = np.flip(arr, axis=-2) if g.reflected else arr
        quarters = (4 * g.rotation) // g.n
        return np.rot90(out, quarters, axes=(-2, -1)).copy()
    return kernels.bilinear_warp(arr, rep_matrix(RepKind.STANDARD, inverse(g)))


def transform_geotensor(g: DihedralElement, x: GeometricTensor) -> GeometricTensor:
    """Full group action: channel representation plus spatial grid transform."""
    data = x.data
    if x.spatial:
        data = spatial_transform(g, data)
        data = apply_channel_action(x.ftype, g, data, axis=1)
    else:
        data = apply_channel_action(x.ftype, g, data, axis=-1)
    return GeometricTensor(dc.Tensor(data), x.ftype, x.spatial)


# -- module plumbing -------------------------------------------------------

class Module:
    """Tiny container: tracks Parameters and sub-Modules by attribute name."""

    def __setattr__(self, name, value):
        if isinstance(value, (dc.Parameter, Module)):
            self.__dict__.setdefault("_members", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, member in self.__dict__.get("_members", {}).items():
            full = f"{prefix}{name}"
            if isinstance(member, dc.Parameter):
                yield full, member
            else:
                yield from member.named_parameters(prefix=full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for member in self.__dict__.get("_members", {}).values():
            if isinstance(member, Module):
                yield from member.modules()

    def project_parameters(self):
        """Re-apply equivariance constraints after an optimizer step."""
        for m in self.modules():
            proj = getattr(m, "_project_own", None)
            if proj is not None:
                proj()

    def param_count(self) -> int:
        """Free parameters: intertwiner-subspace dimension for constrained
        layers, raw array size otherwise."""
        total = 0
        for m in self.modules():
            own = getattr(m, "_own_dof", None)
            if own is not None:
                total += own()
            else:
                for name, p in m.__dict__.get("_members", {}).items():
                    if isinstance(p, dc.Parameter):
                        total += p.data.size
        return total

    def load_state(self, saved, prefix=""):
        dc.restore_into([(prefix + n, p) for n, p in self.named_parameters()], saved)

    def state(self, prefix=""):
        return [(prefix + n, p.data) for n, p in self.named_parameters()]


class ModuleList(Module):
    def __init__(self, mods):
        for i, m in enumerate(mods):
            setattr(self, f"m{i}", m)
        self._list = list(mods)

    def __iter__(self):
        return iter(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def __len__(self):
        return len(self._list)


# -- linear ----------------------------------------------------------------

class EqLinear(Module):
    """Projection-constrained linear map between vector feature types.

    Weights live as the full matrix; the orbit-average projection is applied
    at construction and re-applied after every optimizer step.  The bias is
    constrained to the invariant subspace the same way.
    """

    def __init__(self, in_type: FeatureType, out_type: FeatureType, rng, bias=True):
        self.in_type = in_type
        self.out_type = out_type
        scale = math.sqrt(2.0 / in_type.dim)
        self.weight = dc.Parameter(rng.standard_normal((out_type.dim, in_type.dim)) * scale)
        self.bias = dc.Parameter(np.zeros(out_type.dim)) if bias else None
        self._project_own()

    def _project_own(self):
        self.weight.data[...] = project_intertwiner(self.weight.data, self.in_type, self.out_type)
        if self.bias is not None:
            self.bias.data[...] = project_invariant_vector(self.bias.data, self.out_type)

    def _own_dof(self):
        dof = intertwiner_dof(self.in_type, self.out_type)
        if self.bias is not None:
            dof += invariant_dof(self.out_type)
        return dof

    def forward(self, x: GeometricTensor) -> GeometricTensor:
        if x.spatial:
            raise FeatureTypeError("EqLinear expects vector-form input")
        if x.ftype != self.in_type:
            raise FeatureTypeError(f"input type {x.ftype} != layer type {self.in_type}")
        out = dc.matmul(x.tensor, dc.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            out = dc.add(out, self.bias)
        return GeometricTensor(out, self.out_type)

    __call__ = forward


# -- convolutions ------------------------------------------------------------

def _group_is_pixel_exact(n: int) -> bool:
    """True when every rotation of D_n maps the pixel grid onto itself."""
    return n in (1, 2, 4)


@lru_cache(maxsize=None)
def _spatial_kernel_basis(n: int, k: int) -> np.ndarray:
    """Orthonormal (k*k, d) basis of the spatial kernel space used for D_n.

    Pixel-exact groups use the full grid basis (d = k*k).  Other groups use a
    rotation-closed subspace: on each radius ring of the grid, the constant
    plus first angular harmonics {1, cos phi, sin phi}.  Rotating such a
    kernel by any angle stays inside the span, so the kernel-side action is
    exact and no interpolation loss enters the weights.
    """
    if _group_is_pixel_exact(n):
        return np.eye(k * k)
    c = (k - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    px = (jj - c).ravel()
    py = (c - ii).ravel()
    radius = np.hypot(px, py)
    phi = np.arctan2(py, px)
    cols = []
    for r in sorted(set(np.round(radius, 9))):
        ring = np.isclose(radius, r)
        const = ring.astype(float)
        cols.append(const / np.linalg.norm(const))
        if r > 1e-12 and ring.sum() >= 3:
            for f in (np.cos(phi), np.sin(phi)):
                v = np.where(ring, f, 0.0)
                for prev in cols:
                    v = v - prev * (prev @ v)
                norm = np.linalg.norm(v)
                if norm > 1e-9:
                    cols.append(v / norm)
    return np.stack(cols, axis=1)


def spatial_kernel_dof(n: int, k: int) -> int:
    return _spatial_kernel_basis(n, k).shape[1]


@lru_cache(maxsize=None)
def _kernel_transform_matrix(g: DihedralElement, k: int) -> np.ndarray:
    """(k*k, d) map from a slice's basis coefficients to the grid values of
    rho0(g) applied to that slice."""
    B = _spatial_kernel_basis(g.n, k)
    if _group_is_pixel_exact(g.n):
        basis = np.eye(k * k).reshape(k * k, k, k)
        out = spatial_transform(g, basis)
        # out[b] is rho0(g) applied to basis kernel b, so T[p, b] = out[b, p]
        return out.reshape(k * k, k * k).T.astype(np.float64)
    # evaluate each rotated basis function on the grid: (rho0(g) f)(p) =
    # f(g^-1 p); exact because the span is rotation/reflection closed
    c = (k - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    px = (jj - c).ravel()
    py = (c - ii).ravel()
    mat = rep_matrix(RepKind.STANDARD, inverse(g))
    sx = mat[0, 0] * px + mat[0, 1] * py
    sy = mat[1, 0] * px + mat[1, 1] * py
    radius = np.hypot(px, py)
    phi = np.arctan2(py, px)
    src_r = np.hypot(sx, sy)
    src_phi = np.arctan2(sy, sx)
    out = np.zeros_like(B)
    for col in range(B.shape[1]):
        f = B[:, col]
        # reconstruct the ring function at the rotated sample angles
        vals = np.zeros(k * k)
        for r in sorted(set(np.round(radius, 9))):
            ring = np.isclose(radius, r)
            tgt = np.isclose(src_r, r)
            if not tgt.any():
                continue
            ring_phi = phi[ring]
            ring_f = f[ring]
            # fit a + b cos + c sin on the ring and evaluate at new angles
            A = np.stack([np.ones_like(ring_phi), np.cos(ring_phi), np.sin(ring_phi)], axis=1)
            coef, *_ = np.linalg.lstsq(A, ring_f, rcond=None)
            fit_err = np.abs(A @ coef - ring_f).max()
            if fit_err > 1e-9:
                raise AssertionError(f"kernel basis not band-limited on ring {r}")
            vals[tgt] = coef[0] + coef[1] * np.cos(src_phi[tgt]) + coef[2] * np.sin(src_phi[tgt])
        out[:, col] = vals
    return out


@lru_cache(maxsize=None)
def _lift_expansion(n: int, out_fields: int, in_channels: int, k: int):
    """Sparse map: base coeffs (F_out, C_in, d) -> effective kernel grid
    values (F_out*2n, C_in, k, k)."""
    group = elements(n)
    d = spatial_kernel_dof(n, k)
    rows, cols, vals = [], [], []
    eff_rows = out_fields * 2 * n * in_channels * k * k
    for o in range(out_fields):
        for gi, g in enumerate(group):
            T = _kernel_transform_matrix(g, k)
            ti, tj = np.nonzero(np.abs(T) > 1e-14)
            for c in range(in_channels):
                r0 = ((o * 2 * n + gi) * in_channels + c) * k * k
                c0 = (o * in_channels + c) * d
                rows.extend((r0 + ti).tolist())
                cols.extend((c0 + tj).tolist())
                vals.extend(T[ti, tj].tolist())
    size = out_fields * in_channels * d
    return sp.csr_matrix((vals, (rows, cols)), shape=(eff_rows, size))


@lru_cache(maxsize=None)
def _gconv_expansion(n: int, out_fields: int, in_fields: int, k: int):
    """Sparse map: slice coeffs (F_out, F_in, 2n, d) ->
    effective (F_out*2n, F_in*2n, k, k) with block (o,g),(i,h) equal to
    rho0(g) applied to slice (o, i, g^-1 h)."""
    from .symgroup import compose, from_index

    group = elements(n)
    m = 2 * n
    d = spatial_kernel_dof(n, k)
    rows, cols, vals = [], [], []
    for gi, g in enumerate(group):
        T = _kernel_transform_matrix(g, k)
        ti, tj = np.nonzero(np.abs(T) > 1e-14)
        g_inv = inverse(g)
        for o in range(out_fields):
            for i in range(in_fields):
                for hi in range(m):
                    slice_idx = compose(g_inv, from_index(n, hi)).index()
                    r0 = (((o * m + gi) * in_fields + i) * m + hi) * k * k
                    c0 = ((o * in_fields + i) * m + slice_idx) * d
                    rows.extend((r0 + ti).tolist())
                    cols.extend((c0 + tj).tolist())
                    vals.extend(T[ti, tj].tolist())
    eff = out_fields * m * in_fields * m * k * k
    base = out_fields * in_fields * m * d
    return sp.csr_matrix((vals, (rows, cols)), shape=(eff, base))


def _field_bias_index(fields: int, n: int) -> np.ndarray:
    return np.repeat(np.arange(fields), 2 * n)


class LiftConv(Module):
    """First conv layer: trivial image channels to regular features.  The
    effective kernel stack holds one spatially-transformed copy of the free
    kernel per group element.

    Free parameters are spatial-basis coefficients of shape
    (out_fields, in_channels, d): for pixel-exact groups d = kernel**2 and
    the layout is the flattened kernel grid."""

    def __init__(self, in_channels: int, out_fields: int, n: int, kernel: int, stride=1, pad=0, rng=None):
        self.n = n
        self.in_type = trivial_type(n, in_channels)
        self.out_type = regular_type(n, out_fields)
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.out_fields, self.in_channels = out_fields, in_channels
        d = spatial_kernel_dof(n, kernel)
        scale = math.sqrt(2.0 / (in_channels * kernel * kernel))
        self.base = dc.Parameter(rng.standard_normal((out_fields, in_channels, d)) * scale)
        self.field_bias = dc.Parameter(np.zeros(out_fields))
        self._expand = _lift_expansion(n, out_fields, in_channels, kernel)
        self._bias_idx = _field_bias_index(out_fields, n)

    def _own_dof(self):
        return self.base.data.size + self.field_bias.data.size

    def effective_weight(self):
        flat = dc.reshape(self.base, (-1,))
        eff = dc.sparse_apply(self._expand, flat)
        m = 2 * self.n
        return dc.reshape(eff, (self.out_fields * m, self.in_channels, self.kernel, self.kernel))

    def forward(self, x: GeometricTensor) -> GeometricTensor:
        if not x.spatial:
            raise FeatureTypeError("LiftConv expects spatial input")
        if not x.ftype.only_kinds([RepKind.TRIVIAL]):
            raise FeatureTypeError("LiftConv input channels must all be trivial")
        out = dc.conv2d(x.tensor, self.effective_weight(), self.stride, self.pad)
        bias = dc.take(self.field_bias, self._bias_idx, axis=0)
        out = dc.add(out, dc.reshape(bias, (1, -1, 1, 1)))
        return GeometricTensor(out, self.out_type, spatial=True)

    __call__ = forward


class GroupConv(Module):
    """Regular-to-regular group correlation, slice-parameterized: one free
    spatial kernel (as basis coefficients of width d) per
    (out field, in field, group element) triple."""

    def __init__(self, in_fields: int, out_fields: int, n: int, kernel: int, stride=1, pad=0, rng=None):
        self.n = n
        self.in_type = regular_type(n, in_fields)
        self.out_type = regular_type(n, out_fields)
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.in_fields, self.out_fields = in_fields, out_fields
        m = 2 * n
        d = spatial_kernel_dof(n, kernel)
        scale = math.sqrt(2.0 / (in_fields * m * kernel * kernel))
        self.base = dc.Parameter(rng.standard_normal((out_fields, in_fields, m, d)) * scale)
        self.field_bias = dc.Parameter(np.zeros(out_fields))
        self._expand = _gconv_expansion(n, out_fields, in_fields, kernel)
        self._bias_idx = _field_bias_index(out_fields, n)

    def _own_dof(self):
        return self.base.data.size + self.field_bias.data.size

    def effective_weight(self):
        m = 2 * self.n
        flat = dc.reshape(self.base, (-1,))
        eff = dc.sparse_apply(self._expand, flat)
        return dc.reshape(eff, (self.out_fields * m, self.in_fields * m, self.kernel, self.kernel))

    def forward(self, x: GeometricTensor) -> GeometricTensor:
        if not x.spatial:
            raise FeatureTypeError("GroupConv expects spatial input")
        if x.ftype != self.in_type:
            raise FeatureTypeError(f"input type {x.ftype} != {self.in_type}")
        out = dc.conv2d(x.tensor, self.effective_weight(), self.stride, self.pad)
        bias = dc.take(self.field_bias, self._bias_idx, axis=0)
        out = dc.add(out, dc.reshape(bias, (1, -1, 1, 1)))
        return GeometricTensor(out, self.out_type, spatial=True)

    __call__ = forward


# -- nonlinearity and pooling ------------------------------------------------

def pointwise_relu(x: GeometricTensor) -> GeometricTensor:
    """Elementwise relu; only permutation representations may pass through."""
    if not x.ftype.only_kinds([RepKind.TRIVIAL, RepKind.REGULAR]):
        raise FeatureTypeError(
            f"elementwise nonlinearity needs trivial/regular channels, got {x.ftype}"
        )
    return GeometricTensor(dc.relu(x.tensor), x.ftype, x.spatial)


def group_pool(x: GeometricTensor) -> GeometricTensor:
    """Max over the 2n group positions of each regular field: invariant output."""
    if x.spatial:
        raise FeatureTypeError("group_pool expects vector-form input")
    if not x.ftype.only_kinds([RepKind.REGULAR]):
        raise FeatureTypeError(f"group_pool needs regular channels, got {x.ftype}")
    m = 2 * x.ftype.n
    fields = x.ftype.dim // m
    lead = x.shape[:-1]
    r = dc.reshape(x.tensor, (*lead, fields, m))
    pooled = dc.max_(r, axis=len(lead) + 1)
    return GeometricTensor(pooled, trivial_type(x.ftype.n, fields))


def flatten_spatial(x: GeometricTensor) -> GeometricTensor:
    """(B, C, 1, 1) -> (B, C) once the spatial extent has been reduced."""
    if not x.spatial or x.shape[-1] != 1 or x.shape[-2] != 1:
        raise FeatureTypeError(f"cannot flatten spatial extent {x.shape[-2:]}")
    return GeometricTensor(dc.reshape(x.tensor, x.shape[:2]), x.ftype)


def concat_features(parts) -> GeometricTensor:
    """Concatenate vector geotensors along channels, keeping block order."""
    blocks = []
    n = parts[0].ftype.n
    for p in parts:
        if p.spatial:
            raise FeatureTypeError("concat_features expects vector form")
        blocks.extend(p.ftype.blocks)
    out = dc.concat([p.tensor for p in parts], axis=-1)
    return GeometricTensor(out, FeatureType(n, tuple(blocks)))


# -- self-attention ----------------------------------------------------------

class EqSelfAttention(Module):
    """Single-head scaled dot-product attention over a token axis.

    Q and K are bias-free equivariant maps into the same regular type, so the
    logits are group-invariant (orthogonal representations); V carries tokens
    to the output type.  An optional learned positional encoding, constant
    within each regular field (invariant), is added to the tokens first.
    """

    def __init__(self, token_fields: int, qk_fields: int, out_fields: int, n: int,
                 tokens: int, rng, positional=True):
        self.n = n
        self.tokens = tokens
        self.in_type = regular_type(n, token_fields)
        self.qk_type = regular_type(n, qk_fields)
        self.out_type = regular_type(n, out_fields)
        self.wq = EqLinear(self.in_type, self.qk_type, rng, bias=False)
        self.wk = EqLinear(self.in_type, self.qk_type, rng, bias=False)
        self.wv = EqLinear(self.in_type, self.out_type, rng, bias=True)
        self.positional = None
        if positional:
            self.positional = dc.Parameter(rng.standard_normal((tokens, token_fields)) * 0.02)
            self._pos_idx = _field_bias_index(token_fields, n)
        self.last_weights = None

    def forward(self, x: GeometricTensor) -> GeometricTensor:
        if x.spatial or x.tensor.ndim != 3:
            raise FeatureTypeError("attention expects (batch, tokens, channels)")
        if x.ftype != self.in_type:
            raise FeatureTypeError(f"token type {x.ftype} != {self.in_type}")
        if x.shape[1] != self.tokens:
            raise FeatureTypeError(f"expected {self.tokens} tokens, got {x.shape[1]}")
        t = x.tensor
        if self.positional is not None:
            enc = dc.take(self.positional, self._pos_idx, axis=1)
            t = dc.add(t, enc)
        tokens_gt = GeometricTensor(t, self.in_type)
        q = self.wq(tokens_gt).tensor
        k = self.wk(tokens_gt).tensor
        v = self.wv(tokens_gt).tensor
        scale = 1.0 / math.sqrt(self.qk_type.dim)
        logits = dc.mul(dc.matmul(q, dc.transpose(k, (0, 2, 1))), scale)
        weights = dc.softmax(logits, axis=-1)
        self.last_weights = weights.data
        out = dc.matmul(weights, v)
        return GeometricTensor(out, self.out_type)

    __call__ = forward


# -- conventional counterparts -------------------------------------------------

class PlainLinear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng, bias=True):
        scale = math.sqrt(2.0 / in_dim)
        self.weight = dc.Parameter(rng.standard_normal((out_dim, in_dim)) * scale)
        self.bias = dc.Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x):
        t = x.tensor if isinstance(x, GeometricTensor) else dc.as_tensor(x)
        out = dc.matmul(t, dc.transpose(self.weight, (1, 0)))
        if self.bias is not None:
            out = dc.add(out, self.bias)
        return out

    __call__ = forward


class PlainConv(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride=1, pad=0, rng=None):
        self.stride, self.pad = stride, pad
        scale = math.sqrt(2.0 / (in_channels * kernel * kernel))
        self.weight = dc.Parameter(rng.standard_normal((out_channels, in_channels, kernel, kernel)) * scale)
        self.bias = dc.Parameter(np.zeros(out_channels))

    def forward(self, t):
        out = dc.conv2d(t, self.weight, self.stride, self.pad)
        return dc.add(out, dc.reshape(self.bias, (1, -1, 1, 1)))

    __call__ = forward


class PlainSelfAttention(Module):
    def __init__(self, token_dim: int, qk_dim: int, out_dim: int, tokens: int, rng, positional=True):
        self.tokens = tokens
        self.wq = PlainLinear(token_dim, qk_dim, rng, bias=False)
        self.wk = PlainLinear(token_dim, qk_dim, rng, bias=False)
        self.wv = PlainLinear(token_dim, out_dim, rng, bias=True)
        self.qk_dim = qk_dim
        self.positional = dc.Parameter(rng.standard_normal((tokens, token_dim)) * 0.02) if positional else None

    def forward(self, t):
        if self.positional is not None:
            t = dc.add(t, self.positional)
        q, k, v = self.wq(t), self.wk(t), self.wv(t)
        logits = dc.mul(dc.matmul(q, dc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.qk_dim))
        return dc.matmul(dc.softmax(logits, axis=-1), v)

    __call__ = forward


# -- verification helper --------------------------------------------------------

def equivariance_residual(forward, g: DihedralElement, x: GeometricTensor) -> float:
    """max |f(g x) - g f(x)| over entries, for a GeometricTensor-valued map."""
    lhs = forward(transform_geotensor(g, x))
    rhs = transform_geotensor(g, forward(x))
    return float(np.abs(lhs.data - rhs.data).max())
