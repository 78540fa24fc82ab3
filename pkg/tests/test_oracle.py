import math

import numpy as np
import pytest
from scipy.signal import correlate

from kanwm import oracle
from kanwm.backbones.grids import RbfGrid, SplineGrid
from kanwm.backbones.layers import FastKanLayer, KanLayer, MlpBlock


def test_zero_layers_give_zero():
    x = np.random.default_rng(0).normal(size=(3, 2))
    kan = KanLayer(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2, 11)), np.zeros(4))
    fast = FastKanLayer(np.zeros((4, 2)), np.zeros(4), np.zeros((4, 2, 8)))
    assert not oracle.reference_kan_forward(kan, x).any()
    assert not oracle.reference_fastkan_forward(fast, x).any()


def test_kan_single_edge_by_hand():
    # x = 0 sits on the middle knot of the default grid, where the cubic basis is (1/6, 2/3, 1/6)
    c = np.zeros((1, 1, 11))
    c[0, 0, 4:7] = [1.0, 2.0, 3.0]
    layer = KanLayer(np.array([[0.7]]), np.array([[0.5]]), c, np.array([0.25]))
    expected = 0.7 * 0.0 + 0.5 * (1 / 6 + 2 * 2 / 3 + 3 / 6) + 0.25
    assert oracle.reference_kan_forward(layer, np.array([[0.0]]))[0, 0] == pytest.approx(expected, abs=1e-14)
    x = 1.3
    layer = KanLayer(np.array([[0.7]]), np.array([[0.0]]), c, np.array([0.0]))
    assert oracle.reference_kan_forward(layer, np.array([[x]]))[0, 0] == pytest.approx(0.7 * x / (1 + math.exp(-x)))


def test_fastkan_single_center_formula():
    g = RbfGrid(-1.0, 1.0, 2)
    c = np.zeros((1, 1, 2))
    c[0, 0, 1] = 3.0
    layer = FastKanLayer(np.zeros((1, 1)), np.array([0.5]), c, g)
    x = 0.4
    want = 0.5 + 3.0 * math.exp(-((x - 1.0) / 2.0) ** 2)
    assert oracle.reference_fastkan_forward(layer, np.array([[x]]))[0, 0] == pytest.approx(want)


def test_mlp_reference_constant_input():
    block = MlpBlock(np.ones(3), np.eye(3), np.zeros(3))
    out = oracle.reference_mlp_forward(block, np.full((1, 3), 4.0))
    np.testing.assert_allclose(out, 1 / (1 + math.exp(-1)), rtol=1e-6)


def test_recursive_spline_endpoints():
    g = SplineGrid()
    assert oracle.reference_bspline(-5.0, g)[0] == 1.0
    assert oracle.reference_bspline(5.0, g)[-1] == 1.0
    assert oracle.reference_bspline(9.0, g) == oracle.reference_bspline(5.0, g)


def test_reference_conv_matches_scipy(rng):
    x = rng.normal(size=(1, 6, 6, 1))
    k = rng.normal(size=(3, 3, 1, 1))
    ref = oracle.reference_conv2d(x, k, None, 1, 0)
    np.testing.assert_allclose(ref[0, :, :, 0], correlate(x[0, :, :, 0], k[:, :, 0, 0], mode="valid"), atol=1e-12)


def test_reference_transpose_is_adjoint(rng):
    x = rng.normal(size=(1, 6, 6, 2))
    k = rng.normal(size=(4, 4, 2, 3))
    y = rng.normal(size=(1, 3, 3, 3))
    fwd = oracle.reference_conv2d(x, k, None, 2, 1)
    back = oracle.reference_conv_transpose2d(y, np.transpose(k, (0, 1, 3, 2)), None, 2, 1)
    assert (fwd * y).sum() == pytest.approx((x * back).sum(), rel=1e-12)


def test_fd_quadratic_exact(rng):
    p = {"w": rng.normal(size=(3, 2))}
    g = oracle.finite_difference_grad(lambda q: float((q["w"] ** 2).sum()), p)
    np.testing.assert_allclose(g["w"], 2 * p["w"], atol=1e-8)


def test_fd_silu_derivative():
    for x in (-2.0, 0.3, 1.7):
        g = oracle.finite_difference_grad(lambda q: oracle._silu(float(q["x"][0])), {"x": np.array([x])})["x"][0]
        s = 1 / (1 + math.exp(-x))
        assert g == pytest.approx(s + x * s * (1 - s), abs=1e-6)


def test_fd_second_order_convergence():
    f = lambda q: float(np.sin(q["x"]).sum())  # noqa: E731
    p = {"x": np.array([0.7])}
    err = [abs(oracle.finite_difference_grad(f, p, eps)["x"][0] - math.cos(0.7)) for eps in (1e-2, 5e-3)]
    assert 3.5 < err[0] / err[1] < 4.5


def test_fd_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        oracle.finite_difference_grad(lambda q: float("nan"), {"x": np.zeros(1)})


def test_brute_force_lambda_examples(rng):
    assert oracle.brute_force_lambda_returns([1.0], [0.0, 2.0], [0.5], 0.95, 0.9)[0] == pytest.approx(1 + 0.9 * 0.5 * 2)
    r, v = rng.normal(size=4), rng.normal(size=5)
    mc = sum(0.9 ** i * r[i] for i in range(4)) + 0.9 ** 4 * v[4]
    assert oracle.brute_force_lambda_returns(r, v, np.ones(4), 1.0, 0.9)[0] == pytest.approx(mc, abs=1e-12)
    with pytest.raises(ValueError):
        oracle.brute_force_lambda_returns(np.zeros(13), np.zeros(14), np.zeros(13), 0.9, 0.9)


def test_max_relative_error():
    assert oracle.max_relative_error({"a": np.array([1.0, 2.0])}, {"a": np.array([1.0, 2.2])}) == pytest.approx(0.2 / 2.2)
    assert oracle.max_relative_error({"a": np.zeros(2)}, {"a": np.zeros(2)}) == 0.0


def test_oracle_avoids_contraction_engine():
    import inspect
    src = inspect.getsource(oracle)
    assert "einsum" not in src and "contract(" not in src and "tensor as T" not in src
