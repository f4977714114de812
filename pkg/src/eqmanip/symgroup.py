"""Dihedral group algebra, representation matrices, and intertwiner projection.

Elements of D_n are written (rotation_index, reflected) and act on the plane
as Rot(2*pi*r/n) composed with an optional reflection about the x axis,
reflection applied first.  Everything downstream (feature types, layer
constraints, image transforms) routes through this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np


class GroupOrderMismatch(ValueError):
    """Raised when combining elements of different dihedral groups."""


class DimensionMismatch(ValueError):
    """Raised when a matrix does not fit the declared feature types."""


@dataclass(frozen=True)
class DihedralElement:
    """One element of D_n: a rotation by 2*pi*rotation/n, optionally preceded
    by a reflection about the x axis."""

    n: int
    rotation: int
    reflected: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"group order parameter must be >= 1, got {self.n}")
        object.__setattr__(self, "rotation", self.rotation % self.n)

    @property
    def angle(self) -> float:
        return 2.0 * math.pi * self.rotation / self.n

    @property
    def det(self) -> float:
        """Determinant of the planar action: -1 for reflections."""
        return -1.0 if self.reflected else 1.0

    def index(self) -> int:
        """Position in the canonical enumeration: rotations first, then
        reflections, each by increasing rotation index."""
        return self.rotation + (self.n if self.reflected else 0)

    def is_exact_pixel(self) -> bool:
        """True when the planar action maps a square pixel grid onto itself
        (rotation angle a multiple of 90 degrees)."""
        return (4 * self.rotation) % self.n == 0


def identity(n: int) -> DihedralElement:
    return DihedralElement(n, 0, False)


def compose(g: DihedralElement, h: DihedralElement) -> DihedralElement:
    """Group product g*h (apply h first, then g)."""
    if g.n != h.n:
        raise GroupOrderMismatch(f"cannot compose D_{g.n} with D_{h.n} elements")
    sign = -1 if g.reflected else 1
    return DihedralElement(g.n, g.rotation + sign * h.rotation, g.reflected ^ h.reflected)


def inverse(g: DihedralElement) -> DihedralElement:
    if g.reflected:
        return g
    return DihedralElement(g.n, -g.rotation, False)


def elements(n: int) -> list[DihedralElement]:
    """All 2n elements in canonical order (matches DihedralElement.index)."""
    return [DihedralElement(n, r, f) for f in (False, True) for r in range(n)]


def from_index(n: int, idx: int) -> DihedralElement:
    if not 0 <= idx < 2 * n:
        raise IndexError(f"element index {idx} out of range for D_{n}")
    return DihedralElement(n, idx % n, idx >= n)


class RepKind(Enum):
    TRIVIAL = "trivial"
    SIGN = "sign"
    STANDARD = "standard"
    REGULAR = "regular"


def rep_dim(kind: RepKind, n: int) -> int:
    if kind is RepKind.TRIVIAL or kind is RepKind.SIGN:
        return 1
    if kind is RepKind.STANDARD:
        return 2
    return 2 * n


def rep_matrix(kind: RepKind, g: DihedralElement) -> np.ndarray:
    """Orthogonal representation matrix of g for the given kind."""
    if kind is RepKind.TRIVIAL:
        return np.array([[1.0]])
    if kind is RepKind.SIGN:
        return np.array([[-1.0 if g.reflected else 1.0]])
    if kind is RepKind.STANDARD:
        c, s = math.cos(g.angle), math.sin(g.angle)
        rot = np.array([[c, -s], [s, c]])
        if g.reflected:
            rot = rot @ np.diag([1.0, -1.0])
        return rot
    # Regular: permutation of the group under left multiplication,
    # rho(g) e_h = e_{g h}.
    m = 2 * g.n
    mat = np.zeros((m, m))
    for h in elements(g.n):
        mat[compose(g, h).index(), h.index()] = 1.0
    return mat


@lru_cache(maxsize=None)
def _regular_left_perm(n: int, g_idx: int) -> np.ndarray:
    """perm such that (rho_reg(g) x)[i] = x[perm[i]], i.e. perm[idx(g*h)] = idx(h)."""
    g = from_index(n, g_idx)
    perm = np.empty(2 * n, dtype=np.intp)
    for h in elements(n):
        perm[compose(g, h).index()] = h.index()
    return perm


@dataclass(frozen=True)
class FeatureType:
    """Ordered direct sum of representation blocks labelling a channel axis."""

    n: int
    blocks: tuple[tuple[RepKind, int], ...]

    def __post_init__(self):
        merged: list[list] = []
        for kind, mult in self.blocks:
            if mult < 1:
                raise ValueError(f"multiplicity must be positive, got {mult} for {kind}")
            if merged and merged[-1][0] is kind:
                merged[-1][1] += mult
            else:
                merged.append([kind, mult])
        object.__setattr__(self, "blocks", tuple((k, m) for k, m in merged))

    @property
    def dim(self) -> int:
        return sum(mult * rep_dim(kind, self.n) for kind, mult in self.blocks)

    def iter_slices(self) -> Iterator[tuple[RepKind, int, slice]]:
        """Yield (kind, multiplicity, channel slice) per block, in order."""
        start = 0
        for kind, mult in self.blocks:
            width = mult * rep_dim(kind, self.n)
            yield kind, mult, slice(start, start + width)
            start += width

    def is_permutation_like(self) -> bool:
        """True when every rep matrix of the type is a signed permutation
        regardless of n (trivial/sign/regular blocks only)."""
        return all(kind is not RepKind.STANDARD for kind, _ in self.blocks)

    def only_kinds(self, kinds: Sequence[RepKind]) -> bool:
        return all(kind in kinds for kind, _ in self.blocks)

    def __str__(self):
        parts = [f"{mult}x{kind.value}" for kind, mult in self.blocks]
        return f"D{self.n}[{' + '.join(parts)}]"


def ftype(n: int, *blocks: tuple[RepKind, int]) -> FeatureType:
    return FeatureType(n, tuple(blocks))


def regular_type(n: int, fields: int) -> FeatureType:
    return ftype(n, (RepKind.REGULAR, fields))


def trivial_type(n: int, mult: int) -> FeatureType:
    return ftype(n, (RepKind.TRIVIAL, mult))


def feature_rep_matrix(ft: FeatureType, g: DihedralElement) -> np.ndarray:
    """Block-diagonal action of g on the channel axis described by ft."""
    if g.n != ft.n:
        raise GroupOrderMismatch(f"element of D_{g.n} applied to {ft}")
    out = np.zeros((ft.dim, ft.dim))
    for kind, mult, sl in ft.iter_slices():
        block = rep_matrix(kind, g)
        d = block.shape[0]
        for i in range(mult):
            lo = sl.start + i * d
            out[lo : lo + d, lo : lo + d] = block
    return out


def channel_action_arrays(ft: FeatureType, g: DihedralElement):
    """(perm, signs) realizing rho_ft(g) x = signs * x[perm] for
    permutation-like types; None for types with standard blocks."""
    if not ft.is_permutation_like():
        return None
    perm = np.empty(ft.dim, dtype=np.intp)
    signs = np.ones(ft.dim)
    for kind, mult, sl in ft.iter_slices():
        idx = np.arange(sl.start, sl.stop)
        if kind is RepKind.TRIVIAL:
            perm[idx] = idx
        elif kind is RepKind.SIGN:
            perm[idx] = idx
            if g.reflected:
                signs[idx] = -1.0
        else:  # REGULAR
            base = _regular_left_perm(ft.n, g.index())
            m = 2 * ft.n
            for i in range(mult):
                lo = sl.start + i * m
                perm[lo : lo + m] = lo + base
    return perm, signs


def apply_channel_action(
    ft: FeatureType, g: DihedralElement, x: np.ndarray, axis: int = -1
) -> np.ndarray:
    """Apply rho_ft(g) along the given axis of x."""
    if x.shape[axis] != ft.dim:
        raise DimensionMismatch(f"axis extent {x.shape[axis]} != {ft.dim} of {ft}")
    fast = channel_action_arrays(ft, g)
    if fast is not None:
        perm, signs = fast
        out = np.take(x, perm, axis=axis)
        shape = [1] * x.ndim
        shape[axis] = ft.dim
        return out * signs.reshape(shape)
    mat = feature_rep_matrix(ft, g)
    moved = np.moveaxis(x, axis, -1)
    res = moved @ mat.T
    return np.moveaxis(res, -1, axis)


def project_intertwiner(W: np.ndarray, in_type: FeatureType, out_type: FeatureType) -> np.ndarray:
    """Orbit-average W onto the subspace of maps commuting with the group:
    P(W) = 1/|G| sum_g rho_out(g)^{-1} W rho_in(g)."""
    if in_type.n != out_type.n:
        raise GroupOrderMismatch(f"{in_type} vs {out_type}")
    if W.shape != (out_type.dim, in_type.dim):
        raise DimensionMismatch(
            f"weight shape {W.shape} != ({out_type.dim}, {in_type.dim})"
        )
    acc = np.zeros_like(W, dtype=float)
    for g in elements(in_type.n):
        # rho_out(g)^{-1} W rho_in(g); right-multiplying by rho(g) equals
        # applying rho(g^{-1}) along the column axis (orthogonal reps)
        term = apply_channel_action(out_type, inverse(g), W, axis=0)
        term = apply_channel_action(in_type, inverse(g), term, axis=1)
        acc += term
    return acc / (2 * in_type.n)


def project_invariant_vector(b: np.ndarray, out_type: FeatureType) -> np.ndarray:
    """Average b over the group; the result is invariant (bias constraint)."""
    if b.shape[-1] != out_type.dim:
        raise DimensionMismatch(f"bias extent {b.shape[-1]} != {out_type.dim}")
    acc = np.zeros_like(b, dtype=float)
    for g in elements(out_type.n):
        acc += apply_channel_action(out_type, g, b, axis=-1)
    return acc / (2 * out_type.n)


def intertwiner_dof(in_type: FeatureType, out_type: FeatureType) -> int:
    """Dimension of the intertwiner space, tr(P) by the character formula."""
    total = 0.0
    for g in elements(in_type.n):
        chi_in = np.trace(feature_rep_matrix(in_type, g))
        chi_out = np.trace(feature_rep_matrix(out_type, g))
        total += chi_in * chi_out
    return round(total / (2 * in_type.n))


def invariant_dof(out_type: FeatureType) -> int:
    """Dimension of the invariant subspace (trivial-isotypic multiplicity)."""
    return intertwiner_dof(trivial_type(out_type.n, 1), out_type)
