"""Brute-force references: plain Python loops, no contraction engine.

Everything here runs in float64 and trades speed for obviousness.
"""

from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from .backbones.grids import RbfGrid, SplineGrid
from .backbones.layers import FastKanLayer, KanLayer, MlpBlock

RMS_EPS = 1e-6


def _arr(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def _silu(v: float) -> float:
    return v / (1.0 + math.exp(-v))


def cox_de_boor(x: float, j: int, p: int, knots) -> float:
    """Recursive B-spline ``N_{j,p}(x)`` with the last non-empty span closed on the right."""
    if p == 0:
        lo, hi = knots[j], knots[j + 1]
        if lo <= x < hi:
            return 1.0
        last = max(i for i in range(len(knots) - 1) if knots[i] < knots[i + 1])
        return 1.0 if (j == last and x == hi) else 0.0
    total = 0.0
    d1 = knots[j + p] - knots[j]
    if d1 != 0.0:
        total += (x - knots[j]) / d1 * cox_de_boor(x, j, p - 1, knots)
    d2 = knots[j + p + 1] - knots[j + 1]
    if d2 != 0.0:
        total += (knots[j + p + 1] - x) / d2 * cox_de_boor(x, j + 1, p - 1, knots)
    return total


def reference_bspline(x: float, grid: SplineGrid) -> list[float]:
    xc = min(max(float(x), grid.range_min), grid.range_max)
    knots = [float(t) for t in grid.knots]
    return [cox_de_boor(xc, j, grid.order, knots) for j in range(grid.num_basis)]


def reference_kan_forward(layer: KanLayer, x) -> np.ndarray:
    """Per-edge evaluation of ``phi(x) = w_b silu(x) + w_s sum_k c_k B_k(x)``."""
    x = _arr(x)
    wb, ws, c, b = (_arr(v) for v in (layer.base_weight, layer.spline_weight, layer.coeffs, layer.bias))
    g = layer.grid
    n, d_in = x.shape
    d_out = wb.shape[0]
    out = np.zeros((n, d_out))
    for s in range(n):
        for i in range(d_in):
            xi = min(max(float(x[s, i]), g.range_min), g.range_max)
            basis = reference_bspline(xi, g)
            for j in range(d_out):
                spline = 0.0
                for k, bk in enumerate(basis):
                    spline += c[j, i, k] * bk
                out[s, j] += wb[j, i] * _silu(xi) + ws[j, i] * spline
        for j in range(d_out):
            out[s, j] += b[j]
    return out


def reference_fastkan_forward(layer: FastKanLayer, x) -> np.ndarray:
    x = _arr(x)
    wb, bb, c = (_arr(v) for v in (layer.base_weight, layer.base_bias, layer.coeffs))
    g: RbfGrid = layer.grid
    centers = [float(m) for m in g.centers]
    h = g.bandwidth
    n, d_in = x.shape
    d_out = wb.shape[0]
    out = np.zeros((n, d_out))
    for s in range(n):
        xs = [float(v) for v in x[s]]
        if layer.ln_gain is not None:
            gain, beta = _arr(layer.ln_gain), _arr(layer.ln_bias)
            mu = sum(xs) / d_in
            var = sum((v - mu) ** 2 for v in xs) / d_in
            rbf_in = [(v - mu) / math.sqrt(var + 1e-5) * gain[i] + beta[i] for i, v in enumerate(xs)]
        else:
            rbf_in = xs
        for j in range(d_out):
            base = bb[j]
            spline = 0.0
            for i in range(d_in):
                base += wb[j, i] * _silu(xs[i])
                for k, mu_k in enumerate(centers):
                    spline += c[j, i, k] * math.exp(-((rbf_in[i] - mu_k) / h) ** 2)
            out[s, j] = layer.base_scale * base + layer.spline_scale * spline
    return out


def reference_mlp_forward(block: MlpBlock, x) -> np.ndarray:
    x = _arr(x)
    gain, w, b = _arr(block.gain), _arr(block.weight), _arr(block.bias)
    n, d_in = x.shape
    out = np.zeros((n, w.shape[0]))
    for s in range(n):
        ms = sum(float(v) ** 2 for v in x[s]) / d_in
        inv = 1.0 / math.sqrt(ms + RMS_EPS)
        act = [_silu(float(x[s, i]) * inv * gain[i]) for i in range(d_in)]
        for j in range(w.shape[0]):
            acc = b[j]
            for i in range(d_in):
                acc += w[j, i] * act[i]
            out[s, j] = acc
    return out


def reference_conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Sliding-window cross-correlation on NHWC input."""
    x, k = _arr(x), _arr(kernel)
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = 0.0 if bias is None else float(_arr(bias)[co])
                    for dy in range(kh):
                        for dx in range(kw):
                            iy = oy * stride + dy - padding
                            ix = ox * stride + dx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                for ci in range(cin):
                                    acc += x[s, iy, ix, ci] * k[dy, dx, ci, co]
                    out[s, oy, ox, co] = acc
    return out


def reference_conv_transpose2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Scatter form: every input pixel paints a kernel-sized patch."""
    x, k = _arr(x), _arr(kernel)
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for iy in range(h):
            for ix in range(w):
                for dy in range(kh):
                    for dx in range(kw):
                        oy = iy * stride + dy - padding
                        ox = ix * stride + dx - padding
                        if 0 <= oy < ho and 0 <= ox < wo:
                            for ci in range(cin):
                                for co in range(cout):
                                    out[s, oy, ox, co] += x[s, iy, ix, ci] * k[dy, dx, ci, co]
    if bias is not None:
        out += _arr(bias)
    return out


def finite_difference_grad(f: Callable[[dict], float], params: Mapping[str, np.ndarray],
                           eps: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences ``(f(p + eps e) - f(p - eps e)) / (2 eps)`` per coordinate."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            fp = float(f(base))
            flat[idx] = orig - eps
            fm = float(f(base))
            flat[idx] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while perturbing {name}[{idx}]")
            gf[idx] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-8) -> float:
    """Largest per-tensor ``max|a - n| / max(max|a|, max|n|, floor)``."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), floor)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)) / scale)
    return worst


MAX_EXPANSION_HORIZON = 12


def brute_force_lambda_returns(rewards, values, continues, lam: float, gamma: float) -> np.ndarray:
    """Lambda-returns as an explicit mixture of n-step returns.

    ``rewards[t]`` and ``continues[t]`` belong to step t+1 (length H);
    ``values`` has length H+1.  Works on the leading axis; trailing axes are
    treated elementwise.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    c = np.asarray(continues, dtype=np.float64)
    horizon = r.shape[0]
    if horizon > MAX_EXPANSION_HORIZON:
        raise ValueError(f"expansion limited to H <= {MAX_EXPANSION_HORIZON}")
    if v.shape[0] != horizon + 1 or c.shape[0] != horizon:
        raise ValueError("expected len(values) == len(rewards) + 1 == len(continues) + 1")
    out = np.zeros(r.shape)
    for t in range(horizon):
        span = horizon - t

        def nstep(n):
            acc = np.zeros(r.shape[1:])
            disc = np.ones(r.shape[1:])
            for i in range(1, n + 1):
                acc = acc + disc * r[t + i - 1]
                disc = disc * gamma * c[t + i - 1]
            return acc + disc * v[t + n]

        total = np.zeros(r.shape[1:])
        for n in range(1, span):
            total = total + (1 - lam) * lam ** (n - 1) * nstep(n)
        total = total + lam ** (span - 1) * nstep(span)
        out[t] = total
    return out
