"""Layer records and their vectorized forward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..core import tensor as T
from ..core.tensor import DimensionError, Tensor
from .grids import RbfGrid, SplineGrid, bspline_basis, rbf_basis

RMS_EPS = 1e-6
LN_EPS = 1e-5


def _check_in(x: Tensor, d_in: int, what: str):
    if x.ndim != 2 or x.shape[1] != d_in:
        raise DimensionError(f"{what}: expected input [N, {d_in}], got {x.shape}")


@dataclass
class KanLayer:
    base_weight: Any      # [d_out, d_in]
    spline_weight: Any    # [d_out, d_in]
    coeffs: Any           # [d_out, d_in, G + k]
    bias: Any             # [d_out]
    grid: SplineGrid = field(default_factory=SplineGrid)

    @property
    def d_in(self) -> int:
        return np.shape(self.base_weight)[1]

    @property
    def d_out(self) -> int:
        return np.shape(self.base_weight)[0]


@dataclass
class FastKanLayer:
    base_weight: Any      # [d_out, d_in]
    base_bias: Any        # [d_out]
    coeffs: Any           # [d_out, d_in, G]
    grid: RbfGrid = field(default_factory=RbfGrid)
    base_scale: float = 1.0
    spline_scale: float = 1.0
    ln_gain: Any = None   # optional input LayerNorm (disabled by default)
    ln_bias: Any = None

    @property
    def d_in(self) -> int:
        return np.shape(self.base_weight)[1]

    @property
    def d_out(self) -> int:
        return np.shape(self.base_weight)[0]


@dataclass
class MlpBlock:
    gain: Any             # [d_in]
    weight: Any           # [d_out, d_in]
    bias: Any             # [d_out]

    @property
    def d_in(self) -> int:
        return np.shape(self.weight)[1]

    @property
    def d_out(self) -> int:
        return np.shape(self.weight)[0]


@dataclass
class ConvLayer:
    kernel: Any           # [kh, kw, c_in, c_out]
    bias: Any             # [c_out]
    stride: int = 2
    padding: int = 1


@dataclass
class ConvStack:
    layers: Sequence[ConvLayer]
    transposed: bool = False


def kan_layer_forward(layer: KanLayer, x) -> Tensor:
    """Sum over inputs of ``w_b * silu(x) + w_s * sum_b c_b B_b(x)`` plus bias.

    The input is clamped to the spline range before both branches.
    """
    x = T._wrap(x)
    _check_in(x, layer.d_in, "kan layer")
    grid = layer.grid
    xc = T.clamp(x, grid.range_min, grid.range_max)
    base = T.linear(T.silu(xc), layer.base_weight)
    basis = bspline_basis(xc, grid)
    ws = T._wrap(layer.spline_weight)
    coeffs = T.mul(layer.coeffs, T.reshape(ws, ws.shape + (1,)))
    spline = T.contract(basis, coeffs, "ndb,odb->no")
    return T.add(T.add(base, spline), layer.bias)


def _layer_norm(x: Tensor, gain, bias) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = T.sub(x, mu)
    var = T.mean(T.square(xc), axis=-1, keepdims=True)
    return T.add(T.mul(T.mul(xc, T.rsqrt(T.add(var, LN_EPS))), gain), bias)


def fastkan_layer_forward(layer: FastKanLayer, x) -> Tensor:
    """``w_b * (W silu(x) + b) + w_s * contract(rbf(x), c)``."""
    x = T._wrap(x)
    _check_in(x, layer.d_in, "fastkan layer")
    base = T.linear(T.silu(x), layer.base_weight, layer.base_bias)
    if layer.ln_gain is not None:
        x = _layer_norm(x, layer.ln_gain, layer.ln_bias)
    spline = T.contract(rbf_basis(x, layer.grid), layer.coeffs, "ndg,odg->no")
    if layer.base_scale != 1.0:
        base = T.scale(base, layer.base_scale)
    if layer.spline_scale != 1.0:
        spline = T.scale(spline, layer.spline_scale)
    return T.add(base, spline)


def rmsnorm(x, gain) -> Tensor:
    x = T._wrap(x)
    ms = T.mean(T.square(x), axis=-1, keepdims=True)
    return T.mul(T.mul(x, T.rsqrt(T.add(ms, RMS_EPS))), gain)


def mlp_block_forward(block: MlpBlock, x) -> Tensor:
    """``linear(silu(rmsnorm(x)))``."""
    x = T._wrap(x)
    _check_in(x, block.d_in, "mlp block")
    return T.linear(T.silu(rmsnorm(x, block.gain)), block.weight, block.bias)


def conv_apply(stack: ConvStack, x, activate_last: bool = False) -> Tensor:
    """Run a (transposed) conv stack on NHWC input with SiLU between layers."""
    h = T._wrap(x)
    op = T.conv_transpose2d if stack.transposed else T.conv2d
    n = len(stack.layers)
    for i, layer in enumerate(stack.layers):
        h = op(h, layer.kernel, layer.bias, stride=layer.stride, padding=layer.padding)
        if i < n - 1 or activate_last:
            h = T.silu(h)
    return h
