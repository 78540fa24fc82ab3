"""Quick oracle and property spot-checks, reported as machine-readable pass/fail."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import oracle
from .backbones.grids import SplineGrid, bspline_values
from .backbones.layers import (
    FastKanLayer, KanLayer, MlpBlock, fastkan_layer_forward, kan_layer_forward, mlp_block_forward,
)
from .behavior import lambda_returns
from .core import tensor as T
from .sizing import SizingContext, iso_param_solve, subsystem_param_count
from .worldmodel import RewardBins, expected_value, two_hot_encode


def random_kan_layer(rng: np.random.Generator, d_in: int = 3, d_out: int = 2) -> KanLayer:
    g = SplineGrid()
    return KanLayer(rng.normal(size=(d_out, d_in)), rng.normal(size=(d_out, d_in)),
                    rng.normal(size=(d_out, d_in, g.num_basis)), rng.normal(size=d_out), g)


def random_fastkan_layer(rng: np.random.Generator, d_in: int = 3, d_out: int = 2,
                         layernorm: bool = False) -> FastKanLayer:
    layer = FastKanLayer(rng.normal(size=(d_out, d_in)), rng.normal(size=d_out),
                         rng.normal(size=(d_out, d_in, 8)))
    if layernorm:
        layer.ln_gain, layer.ln_bias = rng.normal(size=d_in), rng.normal(size=d_in)
    return layer


def random_mlp_block(rng: np.random.Generator, d_in: int = 3, d_out: int = 2) -> MlpBlock:
    return MlpBlock(rng.normal(size=d_in), rng.normal(size=(d_out, d_in)), rng.normal(size=d_out))


def _oracle_layers(rng, n: int) -> float:
    worst = 0.0
    for _ in range(n):
        x = rng.uniform(-6, 6, size=(4, 3))
        pairs = [
            (kan_layer_forward(l := random_kan_layer(rng), x).data, oracle.reference_kan_forward(l, x)),
            (fastkan_layer_forward(f := random_fastkan_layer(rng), x).data, oracle.reference_fastkan_forward(f, x)),
            (mlp_block_forward(m := random_mlp_block(rng), x).data, oracle.reference_mlp_forward(m, x)),
        ]
        for fast, ref in pairs:
            worst = max(worst, float(np.abs(fast - ref).max()))
    return worst


def _oracle_conv(rng, n: int) -> float:
    worst = 0.0
    for _ in range(n):
        x = rng.normal(size=(2, 8, 8, 2))
        k = rng.normal(size=(4, 4, 2, 3))
        b = rng.normal(size=3)
        worst = max(worst, float(np.abs(T.conv2d(x, k, b, 2, 1).data
                                        - oracle.reference_conv2d(x, k, b, 2, 1)).max()))
        y = rng.normal(size=(2, 4, 4, 3))
        kt = rng.normal(size=(4, 4, 3, 2))
        worst = max(worst, float(np.abs(T.conv_transpose2d(y, kt, None, 2, 1).data
                                        - oracle.reference_conv_transpose2d(y, kt, None, 2, 1)).max()))
    return worst


def _spline_unity(rng) -> float:
    g = SplineGrid()
    vals = bspline_values(rng.uniform(-5, 5, 1000), g)
    return float(np.abs(vals.sum(-1) - 1).max())


def _grad_layer(rng) -> float:
    layer = random_kan_layer(rng)
    x = rng.uniform(-4, 4, size=(3, 3))
    params = {"base_weight": layer.base_weight, "coeffs": layer.coeffs, "bias": layer.bias}

    def f(p):
        out = kan_layer_forward(KanLayer(p["base_weight"], layer.spline_weight, p["coeffs"], p["bias"]), x)
        return T.sum_(T.square(out))

    _, g = T.value_and_grad(f, params)
    num = oracle.finite_difference_grad(lambda p: f(p).item(), params)
    return oracle.max_relative_error(g, num)


def _lambda(rng) -> float:
    r, v, c = rng.normal(size=6), rng.normal(size=7), rng.uniform(0, 1, 6)
    return float(np.abs(lambda_returns(r, v, c) - oracle.brute_force_lambda_returns(r, v, c, 0.95, 1 - 1 / 333)).max())


def _two_hot(rng) -> float:
    bins = RewardBins()
    v = rng.uniform(-50, 50, 100)
    logits = np.log(two_hot_encode(v, bins) + 1e-300)
    return float(np.max(np.abs(expected_value(logits, bins) - v) / np.maximum(1, np.abs(v))))


def _iso(_rng) -> float:
    ctx = SizingContext()
    counts = [subsystem_param_count("prediction", k, iso_param_solve("prediction", k, 100_000, 0.01, ctx), ctx)
              for k in ("mlp", "kan", "fastkan")]
    return (max(counts) - min(counts)) / 100_000


CHECKS: dict[str, tuple[Callable, float]] = {
    "oracle_layers": (lambda rng: _oracle_layers(rng, 10), 1e-12),
    "oracle_conv": (lambda rng: _oracle_conv(rng, 3), 1e-12),
    "spline_partition_of_unity": (_spline_unity, 1e-6),
    "grad_kan_layer": (_grad_layer, 1e-4),
    "lambda_returns": (_lambda, 1e-12),
    "two_hot_round_trip": (_two_hot, 1e-6),
    "iso_param_prediction": (_iso, 0.02),
}


def run_checks(seed: int = 0) -> dict:
    results = {}
    for name, (fn, tol) in CHECKS.items():
        t0 = time.perf_counter()
        try:
            value = fn(np.random.default_rng(seed))
            ok = bool(value <= tol)
            results[name] = {"passed": ok, "value": value, "tolerance": tol}
        except Exception as err:  # a crash is a failed check, reported rather than raised
            results[name] = {"passed": False, "error": f"{type(err).__name__}: {err}"}
        results[name]["seconds"] = round(time.perf_counter() - t0, 3)
    return {"passed": all(r["passed"] for r in results.values()), "checks": results}
