import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfvs import tensor as T
from qfvs.backbone import (
    BackboneConfig,
    FeatureNet,
    format_config,
    parse_config,
    reduce_mask,
)
from qfvs.tensor import GRAD_RTOL_COMPOSITE


def _net(cfg=None, seed=0):
    return FeatureNet(cfg or BackboneConfig.test_profile(), T.Rng(seed))


def _inputs(cfg, S, rng, valid=None):
    x = rng.normal(size=(S, cfg.T, cfg.input_dim))
    mask = np.ones((S, cfg.T), bool)
    if valid is not None:
        for s, n in enumerate(valid):
            mask[s, n:] = False
            x[s, n:] = 0.0
    return x, mask


def test_default_reduction_200_to_10():
    cfg = BackboneConfig()
    assert cfg.pool_strides == (2, 2, 5, 1, 1)
    assert (cfg.T, cfg.R) == (200, 10)
    assert cfg.R * np.prod(cfg.deconv_strides) == 200


def test_default_encoder_and_decoder_shapes(rng):
    cfg = BackboneConfig(input_dim=16)
    net = _net(cfg)
    x, mask = _inputs(cfg, 20, rng)
    c_v = net.encode(x, mask)
    assert c_v.shape == (20, 10, 256)
    c_c = T.Tensor(np.zeros((20, 10, 768)))
    y = net.decoder.deconv1(T.transpose(c_c, (0, 2, 1)))
    assert y.shape[-1] == 50
    assert net.decode(c_c).shape == (20, 200, 1024)


def test_first_conv_of_zero_input_is_zero():
    cfg = BackboneConfig.test_profile()
    net = _net(cfg)
    pre = net.encoder.blocks[0].convs[0](np.zeros((2, cfg.input_dim, cfg.T)))
    assert (pre.numpy() == 0).all()


def test_decode_zero_is_zero():
    cfg = BackboneConfig.test_profile()
    out = _net(cfg).decode(T.Tensor(np.zeros((3, cfg.R, cfg.block8_out + 2 * cfg.head_dim))))
    assert out.shape == (3, cfg.T, cfg.out_channels)
    assert (out.numpy() == 0).all()


def test_eval_forward_is_deterministic(rng):
    cfg = BackboneConfig.test_profile()
    net = _net(cfg)
    x, mask = _inputs(cfg, 3, rng, valid=[40, 17, 3])
    h_q = rng.normal(size=cfg.query_dim)
    a = net(x, mask, h_q, training=False).c_l.numpy().copy()
    b = net(x, mask, h_q, training=False).c_l.numpy()
    assert np.array_equal(a, b)


def test_train_forward_deterministic_given_rng(rng):
    cfg = BackboneConfig.test_profile()
    x, mask = _inputs(cfg, 2, rng)
    h_q = rng.normal(size=cfg.query_dim)
    a = _net(cfg)(x, mask, h_q, training=True, rng=T.Rng(4)).c_l.numpy()
    b = _net(cfg)(x, mask, h_q, training=True, rng=T.Rng(4)).c_l.numpy()
    c = _net(cfg)(x, mask, h_q, training=True, rng=T.Rng(5)).c_l.numpy()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_single_segment_video_runs(rng):
    cfg = BackboneConfig.test_profile()
    x, mask = _inputs(cfg, 1, rng, valid=[9])
    out = _net(cfg)(x, mask, rng.normal(size=cfg.query_dim), training=True, rng=T.Rng(0))
    assert out.c_l.shape == (1, cfg.T, cfg.out_channels)


def test_input_shape_checked(rng):
    cfg = BackboneConfig.test_profile()
    with pytest.raises(T.ConfigurationError):
        _net(cfg).encode(np.zeros((1, cfg.T + 1, cfg.input_dim)), np.ones((1, cfg.T + 1), bool))


def test_reduce_mask_any_valid():
    mask = np.array([[1, 0, 0, 0, 0, 0], [1, 1, 1, 1, 1, 0]], bool)
    assert reduce_mask(mask, 2).tolist() == [[True, False, False], [True, True, True]]


def test_padded_inputs_get_zero_gradient(rng):
    cfg = BackboneConfig.test_profile()
    net = _net(cfg)
    x, mask = _inputs(cfg, 2, rng, valid=[40, 13])
    x = T.parameter(x)
    h_q = rng.normal(size=cfg.query_dim)
    out = net(x, mask, h_q, training=False)
    rows = T.take(T.reshape(out.c_l, (-1, cfg.out_channels)), np.flatnonzero(mask.reshape(-1)), axis=0)
    T.backward(T.sum(T.mul(rows, rows)))
    assert (x.grad[~mask] == 0).all()
    assert np.abs(x.grad[mask]).sum() > 0


def test_decoder_gradcheck(rng):
    cfg = BackboneConfig.test_profile(deconv_mid=4, out_channels=3)
    net = _net(cfg)
    c_c = T.parameter(rng.normal(size=(2, cfg.R, cfg.block8_out + 2 * cfg.head_dim)))
    w = rng.normal(size=(2, cfg.T, 3))
    errors = T.check_gradients(lambda: T.sum(T.mul(net.decode(c_c), w)), [c_c] + net.decoder.parameters())
    assert max(errors.values()) < GRAD_RTOL_COMPOSITE, errors


def test_tiny_network_gradcheck(rng):
    cfg = BackboneConfig(
        input_dim=4, channels=(3, 3, 4, 4, 4), layers_per_block=(1, 1, 1, 1, 1), pool_strides=(2, 1, 2, 1, 1),
        fc_channels=4, block8_out=3, head_dim=3, query_dim=5, deconv_strides=(2, 2), deconv_mid=3,
        out_channels=3, dropout_p=0.3, T=20,
    )
    net = _net(cfg)
    for name, p in net.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            # zero biases park relu inputs exactly on the kink
            p.data[:] = rng.normal(0.0, 0.1, p.shape)
    x, mask = _inputs(cfg, 2, rng, valid=[20, 11])
    x = T.parameter(x)
    h_q = T.parameter(rng.normal(size=5))
    w = rng.normal(size=(2, 20, 3))

    def loss():
        return T.sum(T.mul(net(x, mask, h_q, training=True, rng=T.Rng(2)).c_l, w))

    errors = T.check_gradients(loss, [x, h_q] + net.parameters(), max_entries=12)
    assert max(errors.values()) < GRAD_RTOL_COMPOSITE, errors


@given(
    st.lists(st.sampled_from([1, 2, 3, 5]), min_size=5, max_size=5),
    st.integers(1, 6),
    st.data(),
)
def test_temporal_round_trip_property(pools, r, data):
    factor = int(np.prod(pools))
    T_len = factor * r
    first = data.draw(st.sampled_from([d for d in range(1, T_len + 1) if T_len % d == 0 and (T_len // d) % r == 0]))
    second = T_len // r // first if (T_len // r) % first == 0 else None
    if second is None:
        return
    cfg = BackboneConfig.test_profile(
        input_dim=3, channels=(2, 2, 2, 2, 2), layers_per_block=(1, 1, 1, 1, 1), pool_strides=tuple(pools),
        fc_channels=2, block8_out=2, head_dim=2, deconv_strides=(first, second), deconv_mid=2, out_channels=2,
        T=T_len,
    )
    assert cfg.R == r
    net = _net(cfg)
    x = np.random.default_rng(0).normal(size=(1, T_len, 3))
    c_v = net.encode(x, np.ones((1, T_len), bool))
    assert c_v.shape[1] == r
    assert net.decode(T.Tensor(np.zeros((1, r, 6)))).shape[1] == T_len


def test_invalid_configs_rejected():
    with pytest.raises(T.ConfigurationError):
        BackboneConfig(T=30)
    with pytest.raises(T.ConfigurationError):
        BackboneConfig(deconv_strides=(4, 4))
    with pytest.raises(T.ConfigurationError):
        BackboneConfig(dropout_p=1.0)
    with pytest.raises(T.ConfigurationError):
        BackboneConfig(channels=(1, 2, 3))


def test_config_dict_and_text_round_trip():
    cfg = BackboneConfig.test_profile(dropout_p=0.25)
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        BackboneConfig.from_dict({"nope": 1})
    text = format_config({"a": (1, 2), "b": 0.5})
    assert text == "a = 1,2\nb = 0.5\n"
    assert parse_config("# c\na = 1 # trailing\n\nb=x\n") == {"a": "1", "b": "x"}
    with pytest.raises(ValueError):
        parse_config("no equals sign")
