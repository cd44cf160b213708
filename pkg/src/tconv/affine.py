"""Similarity transforms, sampling grids and differentiable bilinear resampling.

Coordinates live on a centred unit lattice: pixel ``i`` of an extent ``W``
sits at ``(i + 0.5) / W - 0.5``. A translation of ``t_x`` therefore moves the
sampling point by ``t_x * W`` pixels, i.e. ``t_x`` is a fraction of the image
width. The sampler converts back to pixel indices with
``p = g * W + (W - 1) / 2``.

Grids are pull-back maps: output pixel ``(x, y)`` reads the source at
``Θ [x, y, 1]``. Arrays are indexed ``[..., x, y]`` (width axis first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DTYPE, ContractError, Tensor, _as_tensor, record

__all__ = [
    "DomainError",
    "AffineParams",
    "IDENTITY",
    "compose",
    "affine_matrix",
    "lattice",
    "make_grid",
    "to_pixel",
    "bilinear_sample",
    "warp",
]

# lattice positions that differ from a pixel centre by less than this (in
# pixel units) are treated as exactly on it
SNAP = 1e-9


class DomainError(ValueError):
    """A parameter lies outside the domain its operation is defined on."""


@dataclass(frozen=True)
class AffineParams:
    """One temporal step: scale, rotation (radians) and fractional translation."""

    s: float = 1.0
    r: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        values = (self.s, self.r, self.tx, self.ty)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"non-finite affine parameters {values}")
        if self.s <= 0:
            raise DomainError(f"scale must be positive, got {self.s}")

    @classmethod
    def from_array(cls, a) -> "AffineParams":
        s, r, tx, ty = (float(v) for v in np.asarray(a, dtype=DTYPE).reshape(4))
        return cls(s, r, tx, ty)

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.r, self.tx, self.ty], dtype=DTYPE)

    @property
    def degrees(self) -> float:
        return math.degrees(self.r)

    def is_identity(self) -> bool:
        return self == IDENTITY


IDENTITY = AffineParams()


def compose(params) -> Tensor:
    """Map ``(..., 4)`` parameters ``(s, r, t_x, t_y)`` to ``(..., 2, 3)`` matrices.

    θ11 = s cos r, θ12 = -s sin r, θ13 = t_x s cos r - t_y s sin r,
    θ21 = s sin r, θ22 = s cos r,  θ23 = t_x s sin r + t_y s cos r.
    """
    if isinstance(params, AffineParams):
        params = params.as_array()
    p = _as_tensor(params)
    if p.shape[-1:] != (4,):
        raise ContractError(f"affine params need a trailing axis of 4, got {p.shape}")
    s, r, tx, ty = (p.data[..., k] for k in range(4))
    if np.any(s <= 0):
        raise DomainError(f"scale must be positive, got min {s.min()}")
    c, sn = np.cos(r), np.sin(r)
    m = np.empty(p.shape[:-1] + (2, 3), dtype=DTYPE)
    m[..., 0, 0] = s * c
    m[..., 0, 1] = -s * sn
    m[..., 0, 2] = tx * s * c - ty * s * sn
    m[..., 1, 0] = s * sn
    m[..., 1, 1] = s * c
    m[..., 1, 2] = tx * s * sn + ty * s * c

    def backward(g):
        g11, g12, g13 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
        g21, g22, g23 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
        u = tx * c - ty * sn
        v = tx * sn + ty * c
        ds = g11 * c - g12 * sn + g13 * u + g21 * sn + g22 * c + g23 * v
        dr = s * (-g11 * sn - g12 * c - g13 * v + g21 * c - g22 * sn + g23 * u)
        dtx = s * (g13 * c + g23 * sn)
        dty = s * (-g13 * sn + g23 * c)
        return (np.stack([ds, dr, dtx, dty], axis=-1),)

    return record(m, (p,), backward)


def affine_matrix(params: AffineParams) -> np.ndarray:
    """Plain ``(2, 3)`` matrix for one parameter set."""
    return compose(params).data


def lattice(W: int, H: int) -> np.ndarray:
    """Base coordinates, shape ``(W, H, 2)``, on the centred unit lattice."""
    if W < 1 or H < 1:
        raise ContractError(f"grid extents must be >= 1, got {W}x{H}")
    x = (np.arange(W, dtype=DTYPE) + 0.5) / W - 0.5
    y = (np.arange(H, dtype=DTYPE) + 0.5) / H - 0.5
    out = np.empty((W, H, 2), dtype=DTYPE)
    out[..., 0] = x[:, None]
    out[..., 1] = y[None, :]
    return out


def make_grid(matrix, W: int, H: int) -> Tensor:
    """Apply ``(..., 2, 3)`` matrices to the base lattice -> ``(..., W, H, 2)``."""
    m = _as_tensor(matrix)
    if m.shape[-2:] != (2, 3):
        raise ContractError(f"affine matrix must end in (2, 3), got {m.shape}")
    base = lattice(W, H)
    x, y = base[..., 0], base[..., 1]
    md = m.data[..., None, None, :, :]
    grid = np.empty(m.shape[:-2] + (W, H, 2), dtype=DTYPE)
    grid[..., 0] = md[..., 0, 0] * x + md[..., 0, 1] * y + md[..., 0, 2]
    grid[..., 1] = md[..., 1, 0] * x + md[..., 1, 1] * y + md[..., 1, 2]

    def backward(g):
        gm = np.empty(m.shape, dtype=DTYPE)
        for row in range(2):
            gr = g[..., row]
            gm[..., row, 0] = (gr * x).sum(axis=(-2, -1))
            gm[..., row, 1] = (gr * y).sum(axis=(-2, -1))
            gm[..., row, 2] = gr.sum(axis=(-2, -1))
        return (gm,)

    return record(grid, (m,), backward)


def to_pixel(g: np.ndarray, extent: int) -> np.ndarray:
    """Normalized lattice coordinate -> fractional pixel index."""
    p = g * extent + (extent - 1) / 2
    nearest = np.rint(p)
    return np.where(np.abs(p - nearest) <= SNAP, nearest, p)


def _gather(src, bidx, i, j):
    """src[b, :, i, j] with zeros outside the image; result (B, C, W, H)."""
    B, C, W, H = src.shape
    ok = (i >= 0) & (i < W) & (j >= 0) & (j < H)
    vals = src[bidx, :, np.clip(i, 0, W - 1), np.clip(j, 0, H - 1)]  # (B, W, H, C)
    vals = np.where(ok[..., None], vals, 0.0)
    return np.moveaxis(vals, -1, 1)


def _hat(d):
    return np.maximum(0.0, 1.0 - np.abs(d))


def _canonical(source: Tensor, grid: Tensor):
    s, g = source.shape, grid.shape
    if len(g) < 3 or g[-1] != 2:
        raise ContractError(f"sampling grid must end in (W, H, 2), got {g}")
    if s[-2:] != g[-3:-1]:
        raise ContractError(f"source extent {s[-2:]} does not match grid extent {g[-3:-1]}")
    if len(s) == len(g) - 1:
        lead, channels = s[:-2], 1
    elif len(s) == len(g) and s[:-3] == g[:-3]:
        lead, channels = s[:-3], s[-3]
    else:
        raise ContractError(f"source {s} and grid {g} have incompatible leading axes")
    if lead != g[:-3]:
        raise ContractError(f"source {s} and grid {g} have incompatible leading axes")
    B = int(np.prod(lead, dtype=np.int64))
    return B, channels


def bilinear_sample(source, grid) -> Tensor:
    """Bilinear resampling of ``source`` at ``grid`` with zero outside.

    Shapes: ``source (..., W, H)`` with ``grid (..., W, H, 2)``, or
    ``source (..., C, W, H)`` with ``grid (..., W, H, 2)``, in which case the
    grid is shared across the ``C`` channels.

    Each output value is the sum over source pixels of
    ``source[i, j] * max(0, 1 - |p_x - i|) * max(0, 1 - |p_y - j|)``, taking
    only the four non-trivial terms. Where the hat function has a kink the
    derivative used is the average of its one-sided derivatives.
    """
    source, grid = _as_tensor(source), _as_tensor(grid)
    B, C = _canonical(source, grid)
    W, H = source.shape[-2:]
    src = source.data.reshape(B, C, W, H)
    gd = grid.data.reshape(B, W, H, 2)

    px = to_pixel(gd[..., 0], W)
    py = to_pixel(gd[..., 1], H)
    i0f, j0f = np.floor(px), np.floor(py)
    i0, j0 = i0f.astype(np.int64), j0f.astype(np.int64)
    bidx = np.arange(B)[:, None, None]

    wx = (_hat(px - i0f), _hat(px - (i0f + 1)))
    wy = (_hat(py - j0f), _hat(py - (j0f + 1)))
    wx = tuple(w[:, None] for w in wx)
    wy = tuple(w[:, None] for w in wy)
    corners = [(a, b) for a in (0, 1) for b in (0, 1)]
    vals = {(a, b): _gather(src, bidx, i0 + a, j0 + b) for a, b in corners}

    out = np.zeros((B, C, W, H), dtype=DTYPE)
    for a, b in corners:
        out = out + vals[(a, b)] * wx[a] * wy[b]
    out = out.reshape(source.shape)

    def backward(g):
        g = g.reshape(B, C, W, H)
        grads = [None, None]
        if source.requires_grad:
            flat = np.zeros(B * C * W * H, dtype=DTYPE)
            bc = (np.arange(B)[:, None] * C + np.arange(C)[None, :])[..., None, None]
            for a, b in corners:
                i, j = i0 + a, j0 + b
                ok = ((i >= 0) & (i < W) & (j >= 0) & (j < H))[:, None]
                idx = (bc * W + np.clip(i, 0, W - 1)[:, None]) * H + np.clip(j, 0, H - 1)[:, None]
                contrib = np.where(ok, g * wx[a] * wy[b], 0.0)
                flat += np.bincount(idx.reshape(-1), weights=contrib.reshape(-1), minlength=flat.size)
            grads[0] = flat.reshape(source.shape)
        if grid.requires_grad:
            on_x = (px == i0f)[:, None]
            on_y = (py == j0f)[:, None]
            dpx = np.zeros((B, C, W, H), dtype=DTYPE)
            dpy = np.zeros((B, C, W, H), dtype=DTYPE)
            for b in (0, 1):
                fwd = vals[(1, b)] - vals[(0, b)]
                sym = 0.5 * (vals[(1, b)] - _gather(src, bidx, i0 - 1, j0 + b))
                dpx += wy[b] * np.where(on_x, sym, fwd)
            for a in (0, 1):
                fwd = vals[(a, 1)] - vals[(a, 0)]
                sym = 0.5 * (vals[(a, 1)] - _gather(src, bidx, i0 + a, j0 - 1))
                dpy += wx[a] * np.where(on_y, sym, fwd)
            gg = np.empty((B, W, H, 2), dtype=DTYPE)
            gg[..., 0] = (g * dpx).sum(axis=1) * W
            gg[..., 1] = (g * dpy).sum(axis=1) * H
            grads[1] = gg.reshape(grid.shape)
        return grads

    return record(out, (source, grid), backward)


def warp(image, params: AffineParams | np.ndarray) -> np.ndarray:
    """Resample a ``(..., W, H)`` array by one affine step (no gradient)."""
    image = np.asarray(image, dtype=DTYPE)
    W, H = image.shape[-2:]
    grid = make_grid(compose(params), W, H).data
    if image.ndim > 2:
        grid = np.broadcast_to(grid, image.shape[:-2] + grid.shape)
    return bilinear_sample(Tensor._result(image, False), Tensor._result(grid, False)).data
