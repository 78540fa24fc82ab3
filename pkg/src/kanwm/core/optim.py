"""Adaptive gradient clipping and the LaProp optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

AGC_FLOOR = 1e-3


def agc_clip(grads: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray],
             clip: float = 0.3) -> dict[str, np.ndarray]:
    """Rescale each gradient tensor whose norm exceeds ``clip`` times its parameter norm.

    Clipping is per parameter tensor; parameter norms are floored at 1e-3.
    """
    out = {}
    for name, g in grads.items():
        pnorm = max(float(np.linalg.norm(params[name])), AGC_FLOOR)
        gnorm = float(np.linalg.norm(g))
        limit = clip * pnorm
        if gnorm > limit:
            out[name] = g * (limit / gnorm)
        else:
            out[name] = g
    return out


@dataclass
class OptimizerState:
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-20
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kw) -> "OptimizerState":
        st = cls(**kw)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p)
            st.v[k] = np.zeros_like(p)
        return st


def laprop_step(state: OptimizerState, grads: Mapping[str, np.ndarray],
                params: Mapping[str, np.ndarray]) -> tuple[dict, OptimizerState]:
    """One LaProp update; returns new parameter arrays and a new state.

    The second moment normalizes the gradient before momentum is applied,
    with bias correction on both moments.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = dict(params)
    m_new, v_new = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        normed = g / (np.sqrt(v / c2) + state.eps)
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * normed
        new_params[name] = p - state.lr * m / c1
        m_new[name], v_new[name] = m, v
    new_state = OptimizerState(lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
                               step=t, m=m_new, v=v_new)
    return new_params, new_state
