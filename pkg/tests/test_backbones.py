import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kanwm import oracle
from kanwm.backbones.checkpoint import load_checkpoint, save_checkpoint
from kanwm.backbones.grids import RbfGrid, SplineGrid, bspline_basis, bspline_values, rbf_basis
from kanwm.backbones.layers import (
    ConvLayer, ConvStack, FastKanLayer, KanLayer, MlpBlock, conv_apply, fastkan_layer_forward,
    kan_layer_forward, mlp_block_forward, rmsnorm,
)
from kanwm.backbones.spec import BackboneSpec, backbone_forward, frozen_names, init_backbone, param_count
from kanwm.core import tensor as T
from kanwm.core.tensor import DimensionError
from kanwm.verify import random_fastkan_layer, random_kan_layer, random_mlp_block

from conftest import fd_check

GRID = SplineGrid()
RBF = RbfGrid()


def test_spline_grid_layout():
    assert GRID.num_basis == 11
    assert len(GRID.knots) == GRID.num_basis + GRID.order + 1
    assert np.all(np.diff(GRID.knots) >= 0)
    with pytest.raises(ValueError):
        SplineGrid(range_min=1, range_max=1)
    with pytest.raises(ValueError):
        SplineGrid(grid_size=0)


def test_bspline_endpoint_and_clamping():
    left = bspline_values(np.array([-5.0]), GRID)[0]
    assert left[0] == 1 and not left[1:].any()
    np.testing.assert_array_equal(bspline_values(np.array([7.0]), GRID), bspline_values(np.array([5.0]), GRID))


def test_bspline_matches_recursive_definition(rng):
    for x in rng.uniform(-5, 5, 50):
        got = bspline_values(np.array([x]), GRID)[0]
        assert np.abs(got - oracle.reference_bspline(x, GRID)).max() <= 1e-12


@settings(max_examples=40, deadline=None)
@given(g=st.integers(1, 12), k=st.integers(0, 4), x=st.floats(-5, 5))
def test_partition_of_unity_any_grid(g, k, x):
    vals = bspline_values(np.array([x]), SplineGrid(grid_size=g, order=k))
    assert vals.shape == (1, g + k)
    assert abs(vals.sum() - 1) <= 1e-12
    assert (vals >= -1e-15).all()


def test_rbf_closed_forms():
    assert RBF.bandwidth == pytest.approx(4 / 7)
    np.testing.assert_allclose(np.diff(RBF.centers), 4 / 7)
    vals = rbf_basis(RBF.centers[[2]][None], RBF).data[0, 0]
    assert vals[2] == 1.0
    off = rbf_basis(np.array([[RBF.centers[3] + RBF.bandwidth]]), RBF).data[0, 0, 3]
    assert off == pytest.approx(np.exp(-1), abs=1e-6)
    with pytest.raises(ValueError):
        RbfGrid(num_centers=1)


def test_basis_gradients(rng):
    w = rng.normal(size=(3, 2, GRID.num_basis))
    assert fd_check(lambda p: T.sum_(T.mul(bspline_basis(p["x"], GRID), w)),
                    {"x": rng.uniform(-4.9, 4.9, (3, 2))}) <= 1e-6
    w8 = rng.normal(size=(3, 2, 8))
    assert fd_check(lambda p: T.sum_(T.mul(rbf_basis(p["x"], RBF), w8)),
                    {"x": rng.uniform(-3, 3, (3, 2))}) <= 1e-6


def test_kan_layer_examples():
    d_in, d_out = 4, 3
    zero = KanLayer(np.zeros((d_out, d_in)), np.zeros((d_out, d_in)), np.zeros((d_out, d_in, 11)), np.zeros(d_out))
    assert not kan_layer_forward(zero, np.ones((2, d_in))).data.any()
    ones = KanLayer(np.zeros((d_out, d_in)), np.full((d_out, d_in), 1 / np.sqrt(d_in)),
                    np.ones((d_out, d_in, 11)), np.zeros(d_out))
    np.testing.assert_allclose(kan_layer_forward(ones, np.random.default_rng(0).uniform(-5, 5, (5, d_in))).data,
                               np.sqrt(d_in))


def test_kan_layer_clamps_input(rng):
    layer = random_kan_layer(rng, 4, 3)
    x = rng.uniform(-9, 9, (6, 4))
    np.testing.assert_array_equal(kan_layer_forward(layer, x).data,
                                  kan_layer_forward(layer, np.clip(x, -5, 5)).data)


def test_fastkan_layer_examples():
    zero = FastKanLayer(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 3, 8)))
    assert not fastkan_layer_forward(zero, np.ones((1, 3))).data.any()
    c = np.zeros((2, 3, 8))
    c[1, 2, 5] = 1
    peak = FastKanLayer(np.zeros((2, 3)), np.zeros(2), c)
    x = np.zeros((1, 3))
    x[0, 2] = RBF.centers[5]
    assert fastkan_layer_forward(peak, x).data[0, 1] == pytest.approx(1.0)


def test_mlp_block_examples(rng):
    np.testing.assert_allclose(rmsnorm(np.full((1, 6), 2.5), np.ones(6)).data, 1.0, atol=1e-6)
    block = MlpBlock(np.ones(4), rng.normal(size=(3, 4)), np.zeros(3))
    assert not mlp_block_forward(block, np.zeros((2, 4))).data.any()


def test_layers_reject_wrong_width(rng):
    x = np.ones((2, 5))
    for layer, fwd in ((random_kan_layer(rng), kan_layer_forward),
                       (random_fastkan_layer(rng), fastkan_layer_forward),
                       (random_mlp_block(rng), mlp_block_forward)):
        with pytest.raises(DimensionError):
            fwd(layer, x)


def test_layers_match_loop_oracles(rng):
    for _ in range(10):
        x = rng.uniform(-6, 6, (5, 4))
        k = random_kan_layer(rng, 4, 3)
        assert np.abs(kan_layer_forward(k, x).data - oracle.reference_kan_forward(k, x)).max() <= 1e-12
        f = random_fastkan_layer(rng, 4, 3, layernorm=bool(rng.integers(2)))
        assert np.abs(fastkan_layer_forward(f, x).data - oracle.reference_fastkan_forward(f, x)).max() <= 1e-12
        m = random_mlp_block(rng, 4, 3)
        assert np.abs(mlp_block_forward(m, x).data - oracle.reference_mlp_forward(m, x)).max() <= 1e-12


def test_conv_examples():
    x = np.random.default_rng(0).normal(size=(1, 5, 5, 2))
    ident = np.eye(2).reshape(1, 1, 2, 2)
    np.testing.assert_array_equal(T.conv2d(x, ident, None, 1, 0).data, x)
    out = T.conv2d(np.ones((1, 5, 5, 1)), np.ones((3, 3, 1, 1)), None, 1, 1).data
    assert out[0, 2, 2, 0] == 9


def test_conv_stack_round_trip_shape(rng):
    enc = ConvStack([ConvLayer(rng.normal(size=(4, 4, 3, 4)), np.zeros(4)),
                     ConvLayer(rng.normal(size=(4, 4, 4, 8)), np.zeros(8))])
    dec = ConvStack([ConvLayer(rng.normal(size=(4, 4, 8, 4)), np.zeros(4)),
                     ConvLayer(rng.normal(size=(4, 4, 4, 3)), np.zeros(3))], transposed=True)
    h = conv_apply(enc, rng.normal(size=(2, 16, 16, 3)))
    assert h.shape == (2, 4, 4, 8)
    assert conv_apply(dec, h).shape == (2, 16, 16, 3)


def test_param_count_examples():
    assert param_count(BackboneSpec("mlp", in_dim=4, num_hidden_layers=0)) == 0
    assert param_count(BackboneSpec("fastkan", in_dim=4, out_dim=3, num_hidden_layers=0)) == 111
    assert param_count(BackboneSpec("kan", in_dim=4, out_dim=3, num_hidden_layers=0)) == 147
    assert param_count(BackboneSpec("kan", in_dim=4, out_dim=3, num_hidden_layers=0,
                                    train_spline_weight=True)) == 159


@pytest.mark.parametrize("kind", ["mlp", "kan", "fastkan"])
def test_param_count_strictly_increases_with_units(kind):
    counts = [param_count(BackboneSpec(kind, in_dim=10, out_dim=3, units=u, num_hidden_layers=2))
              for u in range(1, 30)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_spec_validation():
    with pytest.raises(ValueError):
        BackboneSpec("cnn", in_dim=4)
    with pytest.raises(ValueError):
        BackboneSpec("cnn", role="encoder", image_shape=(16, 16, 3), flatten=True, out_dim=8)
    with pytest.raises(ValueError):
        BackboneSpec("kan", role="encoder", image_shape=(16, 16, 3), out_dim=8)
    with pytest.raises(ValueError):
        BackboneSpec("cnn", role="encoder", image_shape=(12, 12, 3), out_dim=8)
    with pytest.raises(ValueError):
        BackboneSpec("transformer", in_dim=4)
    with pytest.raises(ValueError):
        BackboneSpec("mlp", in_dim=4, units=0)


def test_init_rules():
    kan = BackboneSpec("kan", in_dim=16, out_dim=4, num_hidden_layers=0)
    p = init_backbone(kan, 0)
    assert np.all(p["0.spline_weight"] == 0.25)
    assert frozen_names(kan, "x/") == {"x/0.spline_weight"}
    fast = FastKanLayer(np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1, 8)))
    assert fast.base_scale == 1.0 and fast.spline_scale == 1.0
    big = init_backbone(BackboneSpec("kan", in_dim=400, out_dim=300, num_hidden_layers=0), 1)
    assert big["0.base_weight"].std() == pytest.approx(0.5 / 20, rel=0.02)
    assert big["0.coeffs"].std() == pytest.approx(0.1, rel=0.02)


@pytest.mark.parametrize("kind", ["mlp", "kan", "fastkan"])
def test_init_is_deterministic(kind):
    spec = BackboneSpec(kind, in_dim=5, out_dim=2, units=7)
    a, b = init_backbone(spec, 42), init_backbone(spec, 42)
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


@pytest.mark.parametrize("kind", ["mlp", "kan", "fastkan", "cnn"])
def test_visual_backbones_shapes(kind):
    flat = kind != "cnn"
    enc = BackboneSpec(kind, role="encoder", image_shape=(16, 16, 3), cond_dim=2, out_dim=6, units=4, flatten=flat)
    dec = BackboneSpec(kind, role="decoder", image_shape=(16, 16, 3), in_dim=6, units=4, flatten=flat)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 16, 16, 3))
    e = backbone_forward(enc, init_backbone(enc, 0), x, cond=np.ones((2, 2)))
    assert e.shape == (2, 6)
    assert backbone_forward(dec, init_backbone(dec, 0), e).shape == (2, 16, 16, 3)
    with pytest.raises(DimensionError):
        backbone_forward(enc, init_backbone(enc, 0), np.ones((2, 8, 8, 3)), cond=np.ones((2, 2)))


@pytest.mark.parametrize("kind", ["mlp", "kan", "fastkan"])
def test_backbone_gradients(kind, rng):
    spec = BackboneSpec(kind, in_dim=3, out_dim=2, units=4, num_hidden_layers=1)
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in init_backbone(spec, 0).items()}
    frozen = frozen_names(spec)
    fixed = {k: params[k] for k in frozen}
    x = rng.uniform(-2, 2, (5, 3))
    trainable = {k: v for k, v in params.items() if k not in frozen}
    assert fd_check(lambda p: T.sum_(T.square(backbone_forward(spec, {**fixed, **p}, x))), trainable) <= 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    spec = BackboneSpec("kan", in_dim=3, out_dim=2, units=4)
    params = {f"enc/{k}": v for k, v in init_backbone(spec, 0).items()}
    save_checkpoint(tmp_path, params, extra={"note": "x"})
    back, manifest = load_checkpoint(tmp_path)
    assert manifest["version"] == "kanwm-v1"
    assert {e["kind"] for e in manifest["tensors"]} == {"enc"}
    for k, v in params.items():
        np.testing.assert_array_equal(back[k], v.astype(np.float32))
    raw = (tmp_path / "enc__0.coeffs.bin").read_bytes()
    assert len(raw) == params["enc/0.coeffs"].size * 4


def test_checkpoint_rejects_other_versions(tmp_path):
    save_checkpoint(tmp_path, {"w": np.ones(2)})
    m = tmp_path / "manifest.json"
    m.write_text(m.read_text().replace("kanwm-v1", "kanwm-v0"))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)
