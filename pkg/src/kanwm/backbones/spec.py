"""Backbone descriptions, initialization, parameter counting and dispatch."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from ..core import tensor as T
from ..core.tensor import DimensionError, Tensor
from .grids import RbfGrid, SplineGrid
from .layers import (
    ConvLayer, ConvStack, FastKanLayer, KanLayer, MlpBlock, conv_apply,
    fastkan_layer_forward, kan_layer_forward, mlp_block_forward,
)

KINDS = ("mlp", "kan", "fastkan", "cnn")
ROLES = ("vector", "encoder", "decoder")
COEFF_STD = 0.1
CONV_LAYERS = 3
CONV_KERNEL = 4


@dataclass(frozen=True)
class BackboneSpec:
    """One interchangeable function approximator.

    ``units`` is the hidden width (or the base channel depth for ``cnn``).  For
    the ``encoder`` role the input is an image of ``image_shape`` plus a
    ``cond_dim`` vector; for ``decoder`` the output is an image.
    """

    kind: str
    in_dim: int = 0
    out_dim: int | None = None
    units: int = 64
    num_hidden_layers: int = 1
    role: str = "vector"
    image_shape: tuple | None = None
    cond_dim: int = 0
    flatten: bool = False
    spline_grid: SplineGrid = field(default_factory=SplineGrid)
    rbf_grid: RbfGrid = field(default_factory=RbfGrid)
    train_spline_weight: bool = False
    fastkan_layernorm: bool = False
    zero_output: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        visual = self.role != "vector"
        if self.kind == "cnn":
            if not visual:
                raise ValueError("cnn backbones are only valid for visual subsystems")
            if self.flatten:
                raise ValueError("cnn backbones consume images unflattened")
        elif visual and not self.flatten:
            raise ValueError(f"{self.kind} visual backbones need flatten=True")
        if visual:
            if self.image_shape is None or len(self.image_shape) != 3:
                raise ValueError("visual backbones need image_shape (H, W, C)")
            if self.kind == "cnn":
                h, w, _ = self.image_shape
                if h % (2 ** CONV_LAYERS) or w % (2 ** CONV_LAYERS):
                    raise ValueError(f"image sides must be divisible by {2 ** CONV_LAYERS}")
        if self.units < 1 or self.num_hidden_layers < 0:
            raise ValueError("units >= 1 and num_hidden_layers >= 0 required")

    def with_units(self, units: int) -> "BackboneSpec":
        return replace(self, units=int(units))

    @property
    def vector_in(self) -> int:
        if self.role == "encoder":
            return int(np.prod(self.image_shape)) + self.cond_dim
        return self.in_dim

    @property
    def vector_out(self) -> int | None:
        if self.role == "decoder":
            return int(np.prod(self.image_shape))
        return self.out_dim

    def dense_dims(self) -> list[int]:
        dims = [self.vector_in] + [self.units] * self.num_hidden_layers
        if self.vector_out is not None:
            dims.append(self.vector_out)
        return dims if len(dims) > 1 else []


# ---------------------------------------------------------------------------
# parameter layout: name -> (shape, trainable, init rule)

def _conv_channels(spec: BackboneSpec) -> list[int]:
    return [spec.units * 2 ** i for i in range(CONV_LAYERS)]


def _feature_hw(spec: BackboneSpec) -> tuple[int, int]:
    h, w, _ = spec.image_shape
    return h // 2 ** CONV_LAYERS, w // 2 ** CONV_LAYERS


def param_layout(spec: BackboneSpec) -> dict[str, tuple[tuple, bool, str]]:
    lay: dict[str, tuple[tuple, bool, str]] = {}
    if spec.kind == "cnn":
        chans = _conv_channels(spec)
        c_img = spec.image_shape[2]
        fh, fw = _feature_hw(spec)
        flat = chans[-1] * fh * fw
        k = CONV_KERNEL
        if spec.role == "encoder":
            c_prev = c_img
            for i, c in enumerate(chans):
                lay[f"conv{i}.kernel"] = ((k, k, c_prev, c), True, f"fan:{k * k * c_prev}")
                lay[f"conv{i}.bias"] = ((c,), True, "zeros")
                c_prev = c
            lay["proj.weight"] = ((spec.out_dim, flat + spec.cond_dim), True, "fan")
            lay["proj.bias"] = ((spec.out_dim,), True, "zeros")
        else:
            lay["proj.weight"] = ((flat, spec.in_dim), True, "fan")
            lay["proj.bias"] = ((flat,), True, "zeros")
            rev = chans[::-1] + [c_img]
            for i in range(CONV_LAYERS):
                last = i == CONV_LAYERS - 1
                rule = "zeros" if last and spec.zero_output else f"fan:{k * k * rev[i]}"
                lay[f"deconv{i}.kernel"] = ((k, k, rev[i], rev[i + 1]), True, rule)
                lay[f"deconv{i}.bias"] = ((rev[i + 1],), True, "zeros")
        return lay

    dims = spec.dense_dims()
    nl = len(dims) - 1
    for i in range(nl):
        d_in, d_out = dims[i], dims[i + 1]
        out_zero = spec.zero_output and i == nl - 1 and spec.vector_out is not None
        w_rule = "zeros" if out_zero else None
        if spec.kind == "kan":
            lay[f"{i}.base_weight"] = ((d_out, d_in), True, w_rule or "kan_base")
            lay[f"{i}.spline_weight"] = ((d_out, d_in), spec.train_spline_weight, "kan_scale")
            lay[f"{i}.coeffs"] = ((d_out, d_in, spec.spline_grid.num_basis), True, w_rule or "coeff")
            lay[f"{i}.bias"] = ((d_out,), True, "zeros")
        elif spec.kind == "fastkan":
            lay[f"{i}.base_weight"] = ((d_out, d_in), True, w_rule or "fan")
            lay[f"{i}.base_bias"] = ((d_out,), True, "zeros")
            lay[f"{i}.coeffs"] = ((d_out, d_in, spec.rbf_grid.num_centers), True, w_rule or "coeff")
            if spec.fastkan_layernorm:
                lay[f"{i}.ln_gain"] = ((d_in,), True, "ones")
                lay[f"{i}.ln_bias"] = ((d_in,), True, "zeros")
        else:
            lay[f"{i}.gain"] = ((d_in,), True, "ones")
            lay[f"{i}.weight"] = ((d_out, d_in), True, w_rule or "fan")
            lay[f"{i}.bias"] = ((d_out,), True, "zeros")
    return lay


def param_count(spec: BackboneSpec) -> int:
    """Number of trainable scalars; fixed scale parameters are excluded."""
    return int(sum(int(np.prod(shape)) for shape, trainable, _ in param_layout(spec).values()
                   if trainable))


def frozen_names(spec: BackboneSpec, prefix: str = "") -> set[str]:
    return {prefix + k for k, (_, trainable, _) in param_layout(spec).items() if not trainable}


def init_backbone(spec: BackboneSpec, seed) -> dict[str, np.ndarray]:
    """Deterministic parameters for ``spec``; ``seed`` is an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for name, (shape, _, rule) in param_layout(spec).items():
        fan_in = shape[-1] if len(shape) > 1 else 1
        if rule == "zeros":
            arr = np.zeros(shape)
        elif rule == "ones":
            arr = np.ones(shape)
        elif rule == "kan_scale":
            arr = np.full(shape, 1.0 / np.sqrt(shape[1]))
        elif rule == "kan_base":
            arr = rng.normal(0.0, 0.5 / np.sqrt(shape[1]), size=shape)
        elif rule == "coeff":
            arr = rng.normal(0.0, COEFF_STD, size=shape)
        elif rule.startswith("fan"):
            if ":" in rule:
                fan_in = int(rule.split(":")[1])
            arr = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        else:
            raise ValueError(f"unknown init rule {rule!r}")
        params[name] = arr.astype(np.float64)
    return params


# ---------------------------------------------------------------------------
# forward dispatch

def _get(params: Mapping, name: str):
    try:
        return params[name]
    except KeyError as exc:
        raise KeyError(f"missing backbone parameter {name!r}") from exc


def dense_layers(spec: BackboneSpec, params: Mapping) -> list:
    dims = spec.dense_dims()
    layers = []
    for i in range(len(dims) - 1):
        if spec.kind == "kan":
            layers.append(KanLayer(_get(params, f"{i}.base_weight"), _get(params, f"{i}.spline_weight"),
                                   _get(params, f"{i}.coeffs"), _get(params, f"{i}.bias"), spec.spline_grid))
        elif spec.kind == "fastkan":
            layers.append(FastKanLayer(_get(params, f"{i}.base_weight"), _get(params, f"{i}.base_bias"),
                                       _get(params, f"{i}.coeffs"), spec.rbf_grid,
                                       ln_gain=params.get(f"{i}.ln_gain"), ln_bias=params.get(f"{i}.ln_bias")))
        else:
            layers.append(MlpBlock(_get(params, f"{i}.gain"), _get(params, f"{i}.weight"),
                                   _get(params, f"{i}.bias")))
    return layers


def conv_stack(spec: BackboneSpec, params: Mapping) -> ConvStack:
    key = "conv" if spec.role == "encoder" else "deconv"
    layers = [ConvLayer(_get(params, f"{key}{i}.kernel"), _get(params, f"{key}{i}.bias"),
                        stride=2, padding=1) for i in range(CONV_LAYERS)]
    return ConvStack(layers, transposed=spec.role == "decoder")


_FORWARD = {"kan": kan_layer_forward, "fastkan": fastkan_layer_forward, "mlp": mlp_block_forward}


def backbone_forward(spec: BackboneSpec, params: Mapping, x, cond=None) -> Tensor:
    """Apply the backbone.

    vector role: ``x`` is [N, in_dim].  encoder: ``x`` is [N, H, W, C] and
    ``cond`` is [N, cond_dim]; returns [N, out_dim].  decoder: ``x`` is
    [N, in_dim]; returns [N, H, W, C].
    """
    x = T._wrap(x)
    if spec.kind == "cnn":
        return _cnn_forward(spec, params, x, cond)
    if spec.role == "encoder":
        if x.shape[1:] != tuple(spec.image_shape):
            raise DimensionError(f"encoder expects images {spec.image_shape}, got {x.shape[1:]}")
        h = T.reshape(x, (x.shape[0], -1))
        if spec.cond_dim:
            h = T.concat([h, cond], axis=-1)
    else:
        h = x
    fwd = _FORWARD[spec.kind]
    for layer in dense_layers(spec, params):
        h = fwd(layer, h)
    if spec.role == "decoder":
        h = T.reshape(h, (h.shape[0],) + tuple(spec.image_shape))
    return h


def _cnn_forward(spec: BackboneSpec, params: Mapping, x: Tensor, cond) -> Tensor:
    stack = conv_stack(spec, params)
    if spec.role == "encoder":
        if x.shape[1:] != tuple(spec.image_shape):
            raise DimensionError(f"encoder expects images {spec.image_shape}, got {x.shape[1:]}")
        feat = conv_apply(stack, x, activate_last=True)
        feat = T.reshape(feat, (feat.shape[0], -1))
        if spec.cond_dim:
            feat = T.concat([feat, cond], axis=-1)
        return T.linear(feat, params["proj.weight"], params["proj.bias"])
    fh, fw = _feature_hw(spec)
    c = _conv_channels(spec)[-1]
    h = T.silu(T.linear(x, params["proj.weight"], params["proj.bias"]))
    h = T.reshape(h, (x.shape[0], fh, fw, c))
    return conv_apply(stack, h)
