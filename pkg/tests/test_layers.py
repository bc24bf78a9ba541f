import numpy as np
import pytest

from msdfnet import tensor as T
from msdfnet.errors import ConfigError
from msdfnet.layers import BNLayer, ConvLayer, ParamStore, PreActConv, bn_relu_conv, count_params, init_weights
from msdfnet.tensor import Tensor


def test_conv_layer_count():
    store = ParamStore()
    layer = ConvLayer(store, "c", 8, 16, 1)
    assert layer.parameter_count == 8 * 16 + 16 == 144
    assert count_params(store) == 144


def test_bn_layer_count_excludes_running_stats():
    store = ParamStore()
    BNLayer(store, "bn", 32)
    assert count_params(store) == 64
    assert set(store.buffers) == {"bn.running_mean", "bn.running_var"}


def test_duplicate_names_rejected():
    store = ParamStore()
    ConvLayer(store, "a", 1, 1)
    with pytest.raises(ConfigError):
        ConvLayer(store, "a", 1, 1)


def test_count_additive_over_prefixes():
    store = ParamStore()
    ConvLayer(store, "x.conv", 3, 4, 3)
    BNLayer(store, "y.bn", 4)
    assert count_params(store) == count_params(store, "x.") + count_params(store, "y.")


def test_bn_relu_conv_constant_input_gives_bias():
    store = ParamStore()
    bn = BNLayer(store, "bn", 2)
    conv = ConvLayer(store, "conv", 2, 3, 1)
    init_weights(store, 0)
    conv.bias.data[...] = [0.5, -1.0, 2.0]
    out = bn_relu_conv(Tensor(np.full((2, 2, 3, 3), 4.0)), bn, conv, training=True)
    np.testing.assert_array_equal(out.data, np.broadcast_to(conv.bias.data.reshape(1, 3, 1, 1), out.shape))


def test_bn_relu_conv_identity_with_frozen_stats():
    store = ParamStore()
    bn = BNLayer(store, "bn", 3, epsilon=1e-12)
    conv = ConvLayer(store, "conv", 3, 3, 1)
    init_weights(store, 0)
    conv.weight.data[...] = np.eye(3).reshape(3, 3, 1, 1)
    x = np.random.default_rng(0).uniform(0, 2, size=(2, 3, 4, 4))
    with T.precision("verify64"):
        out = bn_relu_conv(Tensor(x), bn, conv, training=False)
    np.testing.assert_allclose(out.data, x, rtol=1e-10)


def test_bn_relu_conv_is_composition():
    store = ParamStore()
    layer = PreActConv(store, "p", 3, 4, kernel=3, padding=1, bias=True)
    init_weights(store, 3)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 5, 5)))
    manual = T.conv2d(T.relu(T.batch_norm(x, layer.bn.gamma, layer.bn.beta, np.zeros(3), np.ones(3),
                                          training=False)),
                      layer.conv.weight, layer.conv.bias, 1, 1, 1)
    assert np.array_equal(layer(x, training=False).data, manual.data)


def test_init_weights_deterministic_and_rules():
    def make():
        store = ParamStore()
        ConvLayer(store, "conv", 4, 8, 3)
        BNLayer(store, "bn", 8)
        init_weights(store, 7)
        return store

    a, b = make(), make()
    for name in a.params:
        assert np.array_equal(a[name].data, b[name].data)
    np.testing.assert_array_equal(a["conv.bias"].data, 0)
    np.testing.assert_array_equal(a["bn.gamma"].data, 1)
    np.testing.assert_array_equal(a["bn.beta"].data, 0)


def test_init_variance_matches_fan_in():
    store = ParamStore()
    layer = ConvLayer(store, "big", 100, 100, 1)
    init_weights(store, 2024)
    assert layer.weight.data.size == 10_000
    target = 2 / 100
    assert abs(layer.weight.data.var() - target) <= 0.1 * target


def test_layer_channel_check_names_layer():
    store = ParamStore()
    layer = PreActConv(store, "stage0.thing", 4, 4)
    with pytest.raises(ConfigError, match="stage0.thing"):
        layer(Tensor(np.ones((1, 3, 2, 2))), training=False)
