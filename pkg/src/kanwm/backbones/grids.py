"""Fixed uniform grids and the two basis families evaluated on them."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..core.tensor import Tensor, custom_op, _wrap


@dataclass(frozen=True)
class SplineGrid:
    """Clamped uniform knot layout: ``grid_size`` intervals, degree ``order``."""

    range_min: float = -5.0
    range_max: float = 5.0
    grid_size: int = 8
    order: int = 3

    def __post_init__(self):
        if not self.range_min < self.range_max:
            raise ValueError("range_min must be below range_max")
        if self.grid_size < 1 or self.order < 0:
            raise ValueError("grid_size >= 1 and order >= 0 required")

    @property
    def num_basis(self) -> int:
        return self.grid_size + self.order

    @cached_property
    def knots(self) -> np.ndarray:
        inner = np.linspace(self.range_min, self.range_max, self.grid_size + 1)
        k = self.order
        return np.concatenate([np.full(k, self.range_min), inner, np.full(k, self.range_max)])


@dataclass(frozen=True)
class RbfGrid:
    """Gaussian centers spread uniformly over a closed range; bandwidth equals the spacing."""

    range_min: float = -2.0
    range_max: float = 2.0
    num_centers: int = 8

    def __post_init__(self):
        if not self.range_min < self.range_max:
            raise ValueError("range_min must be below range_max")
        if self.num_centers < 2:
            raise ValueError("at least two centers are needed to define a spacing")

    @cached_property
    def centers(self) -> np.ndarray:
        return np.linspace(self.range_min, self.range_max, self.num_centers)

    @property
    def bandwidth(self) -> float:
        return (self.range_max - self.range_min) / (self.num_centers - 1)


def _safe_inv(d: np.ndarray) -> np.ndarray:
    out = np.zeros_like(d)
    nz = d != 0
    out[nz] = 1.0 / d[nz]
    return out


def bspline_values(x: np.ndarray, grid: SplineGrid, with_derivative: bool = False):
    """Cox-de Boor evaluation of all ``G + k`` basis functions, vectorized over ``x``.

    Inputs are clamped to the grid range.  Returns ``x.shape + (G + k,)`` and,
    if requested, the derivative with respect to the (clamped) input.
    """
    t = grid.knots.astype(x.dtype)
    k, g = grid.order, grid.grid_size
    xc = np.clip(x, grid.range_min, grid.range_max)
    width = (grid.range_max - grid.range_min) / g
    cell = np.clip(np.floor((xc - grid.range_min) / width).astype(np.int64), 0, g - 1)
    nseg = len(t) - 1
    basis = np.zeros(x.shape + (nseg,), dtype=x.dtype)
    np.put_along_axis(basis, (cell + k)[..., None], 1.0, axis=-1)
    xe = xc[..., None]
    prev = basis
    for p in range(1, k + 1):
        n = prev.shape[-1] - 1
        left = (xe - t[:n]) * _safe_inv(t[p:p + n] - t[:n])
        right = (t[p + 1:p + 1 + n] - xe) * _safe_inv(t[p + 1:p + 1 + n] - t[1:1 + n])
        if p == k:
            lower = prev
        prev = left * prev[..., :-1] + right * prev[..., 1:]
    if not with_derivative:
        return prev
    if k == 0:
        return prev, np.zeros_like(prev)
    n = prev.shape[-1]
    a = k * _safe_inv(t[k:k + n] - t[:n])
    b = k * _safe_inv(t[k + 1:k + 1 + n] - t[1:1 + n])
    deriv = a * lower[..., :-1] - b * lower[..., 1:]
    return prev, deriv


def bspline_basis(x, grid: SplineGrid) -> Tensor:
    """B-spline basis tensor ``[..., G + k]`` for clamped inputs, differentiable in ``x``."""
    x = _wrap(x)
    vals, deriv = bspline_values(x.data, grid, with_derivative=True)
    inside = (x.data >= grid.range_min) & (x.data <= grid.range_max)

    def bwd(gout):
        return ((gout * deriv).sum(axis=-1) * inside,)
    return custom_op(vals, (x,), bwd)


def rbf_basis(x, grid: RbfGrid) -> Tensor:
    """Gaussian basis tensor ``exp(-((x - mu_k) / h)^2)`` of shape ``[..., G]``."""
    x = _wrap(x)
    mu = grid.centers.astype(x.dtype)
    h = grid.bandwidth
    u = (x.data[..., None] - mu) / h
    vals = np.exp(-u * u)

    def bwd(gout):
        return ((gout * vals * u).sum(axis=-1) * (-2.0 / h),)
    return custom_op(vals, (x,), bwd)
