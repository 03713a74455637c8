import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fuselab import tensor as T
from fuselab.datagen import upsample_array
from fuselab.errors import ConfigError, DimensionError, ShapeError
from fuselab.u2net import (VARIANTS, ModelConfig, decode_step, encode_step, init_params,
                           mlp_forward, param_count, parameter_shapes, resblock_forward,
                           u2net_forward, zero_head)


def t(x):
    return T.Tensor(np.asarray(x, dtype=np.float64))


def run(cfg, A, B, params=None):
    params = params if params is not None else init_params(cfg)
    with T.no_grad():
        return u2net_forward(A, B, params, cfg).data


@pytest.mark.parametrize("c,C,S", [(1, 8, 32), (3, 31, 64)])
def test_preset_shapes(c, C, S):
    cfg = ModelConfig(pan_channels=c, bands=C, width=S, head_width=16)
    rng = np.random.default_rng(0)
    O = run(cfg, rng.random((1, 64, 64, c)), rng.random((1, 16, 16, C)))
    assert O.shape == (1, 64, 64, C)


@given(st.sampled_from(VARIANTS), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 10**6))
def test_output_shape_randomized(variant, hq, wq, n, seed):
    cfg = ModelConfig(pan_channels=1, bands=3, width=4, head_width=2, variant=variant, seed=seed)
    rng = np.random.default_rng(seed)
    H, W = 4 * hq, 4 * wq
    O = run(cfg, rng.random((n, H, W, 1)), rng.random((n, hq, wq, 3)))
    assert O.shape == (n, H, W, 3)


@given(st.sampled_from(VARIANTS), st.sampled_from(["f32", "f64"]), st.integers(0, 10**6))
def test_zero_head_is_bicubic_identity(variant, precision, seed):
    cfg = ModelConfig(pan_channels=1, bands=4, width=8, head_width=4, variant=variant,
                      precision=precision, zero_head=True, seed=seed)
    rng = np.random.default_rng(seed)
    A, B = rng.random((1, 8, 8, 1)), rng.random((1, 2, 2, 4))
    O = run(cfg, A, B)
    assert np.array_equal(O, upsample_array(B).astype(cfg.dtype))


def test_zero_head_in_place(tiny_config):
    p = init_params(tiny_config)
    zero_head(p)
    rng = np.random.default_rng(0)
    A, B = rng.random((1, 8, 8, 1)), rng.random((1, 2, 2, 4))
    assert np.array_equal(run(tiny_config, A, B, p), upsample_array(B))


def test_v2_and_full_same_shape(tiny_config):
    rng = np.random.default_rng(0)
    A, B = rng.random((2, 8, 8, 1)), rng.random((2, 2, 2, 4))
    assert run(tiny_config, A, B).shape == run(tiny_config.with_(variant="v2"), A, B).shape


def test_deterministic(tiny_config):
    rng = np.random.default_rng(0)
    A, B = rng.random((1, 8, 8, 1)), rng.random((1, 2, 2, 4))
    p1, p2 = init_params(tiny_config), init_params(tiny_config)
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)
    assert np.array_equal(run(tiny_config, A, B, p1), run(tiny_config, A, B, p2))


def test_param_count_properties():
    cfg = ModelConfig(pan_channels=1, bands=8, width=32, head_width=16)
    n = param_count(cfg)
    assert n >= 500_000
    assert all(param_count(cfg.with_(seed=s)) == n for s in range(5))
    assert param_count(cfg.with_(width=64)) > n
    p = init_params(cfg)
    assert sum(v.size for v in p.values()) == n
    assert all(np.all(np.isfinite(v.data)) for v in p.values())


def test_init_bounds(tiny_config):
    p = init_params(tiny_config)
    for name, shape, fan_in in parameter_shapes(tiny_config):
        w = p[f"{name}.w"].data
        assert w.shape == shape and np.abs(w).max() <= 1 / np.sqrt(fan_in)
        assert not np.any(p[f"{name}.b"].data)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(width=12, head_width=8)
    with pytest.raises(ConfigError):
        ModelConfig(variant="v9")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"width": 8, "depth": 3})


def test_input_errors(tiny_config):
    p = init_params(tiny_config)
    with pytest.raises(ConfigError):
        u2net_forward(np.zeros((1, 6, 6, 1)), np.zeros((1, 1, 1, 4)), p, tiny_config)
    with pytest.raises(ShapeError, match="must be 2x2"):
        u2net_forward(np.zeros((1, 8, 8, 1)), np.zeros((1, 4, 4, 4)), p, tiny_config)
    with pytest.raises(DimensionError, match="bands"):
        u2net_forward(np.zeros((1, 8, 8, 1)), np.zeros((1, 2, 2, 5)), p, tiny_config)
    with pytest.raises(DimensionError, match="channels"):
        u2net_forward(np.zeros((1, 8, 8, 3)), np.zeros((1, 2, 2, 4)), p, tiny_config)


# -- building blocks --------------------------------------------------------


def block_params(rng, specs, zero=False):
    out = {}
    for name, shape in specs:
        nb = shape[2] * shape[3] if name.endswith(".dw") else shape[-1]
        w = np.zeros(shape) if zero else rng.standard_normal(shape) * 0.3
        b = np.zeros(nb) if zero else rng.standard_normal(nb) * 0.1
        out[f"{name}.w"], out[f"{name}.b"] = t(w), t(b)
    return out


def test_resblock(rng):
    x = rng.standard_normal((1, 8, 8, 4))
    specs = [("r.conv1", (3, 3, 4, 4)), ("r.conv2", (3, 3, 4, 4))]
    assert np.array_equal(resblock_forward(t(x), block_params(rng, specs, zero=True), "r").data, x)
    p = block_params(rng, specs)
    y = resblock_forward(t(x), p, "r").data
    h = T.lrelu(T.conv2d(t(x), p["r.conv1.w"], p["r.conv1.b"]), 0.2)
    manual = x + T.conv2d(h, p["r.conv2.w"], p["r.conv2.b"]).data
    assert y.shape == x.shape
    np.testing.assert_allclose(y, manual, atol=1e-12)


def test_mlp(rng):
    x = rng.standard_normal((1, 3, 4, 6))
    specs = [("m.fc1", (6, 6)), ("m.fc2", (6, 6))]
    assert np.array_equal(mlp_forward(t(x), block_params(rng, specs, zero=True), "m").data, x)
    p = block_params(rng, specs)
    y = mlp_forward(t(x), p, "m").data
    h = x @ p["m.fc1.w"].data + p["m.fc1.b"].data
    h = np.where(h < 0, 0.2 * h, h)
    np.testing.assert_allclose(y, x + h @ p["m.fc2.w"].data + p["m.fc2.b"].data, atol=1e-12)
    perm = rng.permutation(12)
    xp = x.reshape(1, 12, 6)[:, perm].reshape(x.shape)
    np.testing.assert_allclose(mlp_forward(t(xp), p, "m").data,
                               y.reshape(1, 12, 6)[:, perm].reshape(x.shape), atol=1e-12)


def sampling_params(rng, s):
    return block_params(rng, [("d.conv", (2, 2, s, s)), ("d.dw", (3, 3, s, 2)),
                              ("u", (2, 2, 2 * s, s))])


def test_encode_decode_shapes(rng):
    p = sampling_params(rng, 2)
    assert encode_step(t(rng.standard_normal((1, 4, 4, 2))), p, "d").shape == (1, 2, 2, 4)
    p = sampling_params(rng, 5)
    x = t(rng.standard_normal((1, 16, 16, 5)))
    down = encode_step(x, p, "d")
    assert down.shape == (1, 8, 8, 10)
    assert decode_step(down, p, "u").shape == x.shape


def test_encode_decode_gradients(rng):
    p = sampling_params(rng, 2)
    w = rng.standard_normal((1, 2, 2, 4))
    x = rng.standard_normal((1, 4, 4, 2))
    assert T.finite_diff_check(lambda v: T.sum_all(T.mul(encode_step(v, p, "d"), t(w))), x) < 1e-6
    w2 = rng.standard_normal((1, 8, 8, 2))
    x2 = rng.standard_normal((1, 4, 4, 4))
    assert T.finite_diff_check(lambda v: T.sum_all(T.mul(decode_step(v, p, "u"), t(w2))), x2) < 1e-6
