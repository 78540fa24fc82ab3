"""Forward+backward throughput of iso-parameter prediction heads."""

from __future__ import annotations

import time

import numpy as np

from .backbones.spec import backbone_forward, frozen_names, init_backbone
from .core import tensor as T
from .sizing import SizingContext, iso_param_solve, subsystem_specs

KINDS = ("mlp", "kan", "fastkan")


def head_fps(kind: str, *, budget: int = 100_000, tolerance: float = 0.01, batch: int = 1024,
             reps: int = 200, precision: str = "float32", seed: int = 0, warmup: int = 20) -> float:
    """Samples per second through both prediction heads (reward and continue) and back."""
    ctx = SizingContext()
    units = iso_param_solve("prediction", kind, budget, tolerance, ctx)
    specs = subsystem_specs("prediction", kind, units, ctx)
    rng = np.random.default_rng(seed)
    params = [init_backbone(s, rng) for s in specs]
    # perturb the zero-initialized output layer so backward does real work
    params = [{k: v + 0.01 * rng.standard_normal(v.shape) for k, v in p.items()} for p in params]
    frozen = [frozen_names(s) for s in specs]
    x = rng.standard_normal((batch, ctx.feat_dim))
    with T.precision(precision):
        xs = T.tensor(x)

        def once():
            tracked = [{k: T.parameter(v) for k, v in p.items() if k not in f} for p, f in zip(params, frozen)]
            loss = None
            for spec, p, tp in zip(specs, params, tracked):
                out = T.mean(backbone_forward(spec, {**p, **tp}, xs))
                loss = out if loss is None else T.add(loss, out)
            T.backward(loss, [v for tp in tracked for v in tp.values()])

        for _ in range(warmup):
            once()
        t0 = time.perf_counter()
        for _ in range(reps):
            once()
        elapsed = time.perf_counter() - t0
    return batch * reps / elapsed


def run_benchmark(reps: int = 200, batch: int = 1024, repeats: int = 1, **kw) -> dict[str, list[float]]:
    """``{kind: [fps per repeat]}`` for every prediction-head backbone."""
    out: dict[str, list[float]] = {k: [] for k in KINDS}
    for _ in range(repeats):
        for kind in KINDS:
            out[kind].append(head_fps(kind, reps=reps, batch=batch, **kw))
    return out
