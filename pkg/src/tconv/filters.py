"""Temporally factorized filters: a 2D base slice plus one affine step per lag.

A bank of ``C_out`` factorized filters is held as two tensors::

    base    (C_out, C_in, W, H)   the first temporal slice of every filter
    thetas  (C_out, D - 1, 4)     (s, r, t_x, t_y) per step, shared over C_in

and materializes into a dense ``(C_out, C_in, D, W, H)`` weight where slice
``t + 1`` is slice ``t`` resampled through ``thetas[:, t]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import AffineParams, bilinear_sample, compose, make_grid
from .core import DTYPE, ContractError, Tensor, _as_tensor, stack

__all__ = [
    "Filter3T",
    "Filter3D",
    "identity_thetas",
    "materialize_bank",
    "materialize",
    "param_count",
    "import_2d",
    "init_base",
]


def identity_thetas(n_filters: int, depth: int) -> np.ndarray:
    out = np.zeros((n_filters, max(depth - 1, 0), 4), dtype=DTYPE)
    out[..., 0] = 1.0
    return out


def materialize_bank(base, thetas) -> Tensor:
    """Dense ``(C_out, C_in, D, W, H)`` weights from a factorized bank."""
    base, thetas = _as_tensor(base), _as_tensor(thetas)
    if base.ndim != 4:
        raise ContractError(f"base bank must be (C_out, C_in, W, H), got {base.shape}")
    if thetas.ndim != 3 or thetas.shape[0] != base.shape[0] or thetas.shape[2] != 4:
        raise ContractError(f"thetas {thetas.shape} do not fit base {base.shape}")
    W, H = base.shape[-2:]
    steps = thetas.shape[1]
    slices = [base]
    if steps:
        grids = make_grid(compose(thetas), W, H)  # (C_out, D-1, W, H, 2)
        current = base
        for t in range(steps):
            current = bilinear_sample(current, grids[:, t])
            slices.append(current)
    return stack(slices, axis=2)


@dataclass
class Filter3D:
    weights: Tensor  # (C_in, D, W, H)

    @property
    def depth(self) -> int:
        return self.weights.shape[1]


@dataclass
class Filter3T:
    """One factorized filter: ``base`` is ``(C_in, W, H)``, ``thetas`` ``(D-1, 4)``."""

    base: Tensor
    thetas: Tensor

    def __post_init__(self):
        self.base = self.base if isinstance(self.base, Tensor) else Tensor(self.base)
        self.thetas = self.thetas if isinstance(self.thetas, Tensor) else Tensor(self.thetas)
        if self.base.ndim != 3:
            raise ContractError(f"base must be (C_in, W, H), got {self.base.shape}")
        if self.thetas.ndim != 2 or self.thetas.shape[1] != 4:
            raise ContractError(f"thetas must be (D-1, 4), got {self.thetas.shape}")

    @classmethod
    def identity(cls, base, depth: int, requires_grad: bool = False) -> "Filter3T":
        return cls(Tensor(base, requires_grad=requires_grad),
                   Tensor(identity_thetas(1, depth)[0], requires_grad=requires_grad))

    @property
    def depth(self) -> int:
        return self.thetas.shape[0] + 1

    @property
    def params(self) -> list[AffineParams]:
        return [AffineParams.from_array(row) for row in self.thetas.data]

    def n_trainable(self) -> int:
        return self.base.size + self.thetas.size

    def materialize(self) -> Filter3D:
        return materialize(self)


def materialize(f: Filter3T) -> Filter3D:
    w = materialize_bank(f.base.reshape((1,) + f.base.shape), f.thetas.reshape((1,) + f.thetas.shape))
    return Filter3D(w.reshape(w.shape[1:]))


def param_count(c_in: int, width: int, height: int, depth: int) -> tuple[int, int]:
    """Trainable scalars of one factorized filter and of its dense counterpart."""
    if min(c_in, width, height, depth) < 1:
        raise ContractError("all extents must be >= 1")
    spatial = c_in * width * height
    return spatial + 4 * (depth - 1), spatial * depth


def import_2d(bank, depth: int, geometry: tuple[int, int, int, int] | None = None) -> list[Filter3T]:
    """One identity-initialized factorized filter per 2D filter in ``bank``.

    ``bank`` is ``(C_out, C_in, W, H)``; ``geometry``, when given, is the
    expected ``(C_out, C_in, W, H)`` of the receiving layer.
    """
    bank = np.asarray(bank.data if isinstance(bank, Tensor) else bank, dtype=DTYPE)
    if bank.ndim != 4:
        raise ContractError(f"2D filter bank must be (C_out, C_in, W, H), got {bank.shape}")
    if geometry is not None and tuple(bank.shape) != tuple(geometry):
        raise ContractError(f"bank shape {bank.shape} does not match layer geometry {tuple(geometry)}")
    if depth < 1:
        raise ContractError(f"depth must be >= 1, got {depth}")
    return [Filter3T(Tensor(f.copy()), Tensor(identity_thetas(1, depth)[0])) for f in bank]


def init_base(rng: np.random.Generator, c_out: int, c_in: int, width: int, height: int) -> np.ndarray:
    """Uniform in ``±sqrt(1 / (C_in W H))``."""
    bound = np.sqrt(1.0 / (c_in * width * height))
    return rng.uniform(-bound, bound, size=(c_out, c_in, width, height))

