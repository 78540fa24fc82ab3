import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kanwm.core.optim import OptimizerState, agc_clip, laprop_step


def _with_norm(n, norm, seed=0):
    v = np.random.default_rng(seed).normal(size=n)
    return v * (norm / np.linalg.norm(v))


def test_agc_small_ratio_unchanged():
    g = _with_norm(5, 0.1)
    out = agc_clip({"w": g}, {"w": _with_norm(5, 1.0, 1)}, 0.3)
    np.testing.assert_array_equal(out["w"], g)


def test_agc_scales_to_clip():
    g = _with_norm(5, 1.0)
    out = agc_clip({"w": g}, {"w": _with_norm(5, 1.0, 1)}, 0.3)
    np.testing.assert_allclose(out["w"], 0.3 * g)


def test_agc_zero_parameter_uses_floor():
    g = _with_norm(4, 1.0)
    out = agc_clip({"w": g}, {"w": np.zeros(4)}, 0.3)
    np.testing.assert_allclose(out["w"], 0.3 * 1e-3 * g)


def test_agc_is_per_tensor():
    p = {"a": _with_norm(3, 1.0), "b": _with_norm(3, 10.0)}
    g = {"a": _with_norm(3, 1.0), "b": _with_norm(3, 1.0)}
    out = agc_clip(g, p)
    assert np.linalg.norm(out["a"]) == pytest.approx(0.3)
    np.testing.assert_array_equal(out["b"], g["b"])


@settings(max_examples=50, deadline=None)
@given(gn=st.floats(1e-6, 1e3), pn=st.floats(0, 1e3), seed=st.integers(0, 1000))
def test_agc_idempotent(gn, pn, seed):
    g, p = {"w": _with_norm(6, gn, seed)}, {"w": _with_norm(6, pn, seed + 1) if pn else np.zeros(6)}
    once = agc_clip(g, p)
    twice = agc_clip(once, p)
    np.testing.assert_allclose(twice["w"], once["w"], rtol=1e-12)


def test_laprop_zero_grads_leave_params():
    p = {"w": np.arange(3.0)}
    st_ = OptimizerState.zeros_like(p)
    new, st2 = laprop_step(st_, {"w": np.zeros(3)}, p)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert st2.step == 1


def test_laprop_first_step_is_lr_sign():
    p = {"w": np.zeros(2)}
    new, _ = laprop_step(OptimizerState.zeros_like(p), {"w": np.array([0.5, -0.5])}, p)
    np.testing.assert_allclose(new["w"], [-4e-5, 4e-5], rtol=1e-9)


def test_laprop_tiny_gradients_stay_finite():
    p = {"w": np.ones(3)}
    new, st_ = laprop_step(OptimizerState.zeros_like(p), {"w": np.full(3, 1e-30)}, p)
    assert np.isfinite(new["w"]).all() and np.isfinite(st_.v["w"]).all()


def test_laprop_matches_written_rule():
    rng = np.random.default_rng(3)
    p = {"w": rng.normal(size=4)}
    state = OptimizerState.zeros_like(p, lr=1e-2)
    m = v = np.zeros(4)
    w = p["w"].copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        p, state = laprop_step(state, {"w": g}, p)
        v = 0.999 * v + 0.001 * g * g
        m = 0.9 * m + 0.1 * g / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-20)
        w = w - 1e-2 * m / (1 - 0.9 ** t)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)
    assert state.step == 5


def test_laprop_is_deterministic_and_checks_shapes():
    rng = np.random.default_rng(0)
    p, g = {"w": rng.normal(size=(3, 2))}, {"w": rng.normal(size=(3, 2))}
    a, _ = laprop_step(OptimizerState.zeros_like(p), g, p)
    b, _ = laprop_step(OptimizerState.zeros_like(p), g, p)
    assert a["w"].tobytes() == b["w"].tobytes()
    with pytest.raises(ValueError):
        laprop_step(OptimizerState.zeros_like(p), {"w": np.ones(6)}, p)
