import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascadedose import ops, vit
from cascadedose.layers import Initializer
from cascadedose.tensor import ConfigError, DimensionError, Tensor


def test_patch_count_at_full_size():
    assert vit.EncoderConfig(128, 16, 1, 768, 12, 12).num_tokens == 512


@pytest.mark.parametrize("L,taps", [(12, (3, 6, 9, 12)), (8, (2, 4, 6, 8)), (4, (1, 2, 3, 4))])
def test_default_taps(L, taps):
    assert vit.default_taps(L) == taps


def test_bad_taps_rejected():
    with pytest.raises(ConfigError):
        vit.EncoderConfig(16, 8, 1, 16, 8, 2, tap_layers=(1, 2, 3, 8))
    with pytest.raises(ConfigError):
        vit.default_taps(6)


def test_config_validation():
    with pytest.raises(ConfigError):
        vit.EncoderConfig(12, 8)
    with pytest.raises(ConfigError):
        vit.EncoderConfig(16, 8, 1, 10, 4, 4)


@given(st.integers(1, 2), st.sampled_from([1, 2, 4]), st.tuples(*[st.integers(1, 2)] * 3))
def test_patchify_roundtrip(c, P, g):
    x = np.arange(c * P ** 3 * g[0] * g[1] * g[2], dtype=np.float64).reshape((c,) + tuple(P * n for n in g))
    t = vit.patchify(Tensor(x), P)
    assert t.shape == (g[0] * g[1] * g[2], c * P ** 3)
    np.testing.assert_array_equal(vit.unpatchify(t, P, c, g).data, x)


def test_patch_order_is_zyx_grid_then_channel_major():
    x = np.arange(2 * 4 * 4 * 4).reshape(2, 4, 4, 4).astype(float)
    t = vit.patchify(Tensor(x), 2).data
    # token 1 is grid cell (0, 0, 1); its first entry is channel 0, voxel (0, 0, 2)
    assert t[1, 0] == x[0, 0, 0, 2]
    assert t[0, 8] == x[1, 0, 0, 0]


def test_patchify_rejects_indivisible():
    with pytest.raises(ConfigError):
        vit.patchify(Tensor(np.zeros((1, 6, 6, 6))), 4)


def _tiny(seed=0):
    cfg = vit.EncoderConfig(8, 4, 1, 12, 4, 3)
    return cfg, vit.init_encoder_params(cfg, Initializer(seed, np.float64), "enc")


def test_attention_rows_sum_to_one(rng):
    cfg, p = _tiny()
    x = Tensor(rng.standard_normal((8, 12)))
    _, attn = vit.multi_head_attention(x, p, "enc.layer01.attn", 3, return_weights=True)
    assert attn.shape == (3, 8, 8)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-12)


def test_attention_matches_loop_oracle(rng):
    cfg, p = _tiny()
    x = rng.standard_normal((8, 12))
    got = vit.multi_head_attention(Tensor(x), p, "enc.layer01.attn", 3).data
    g = {k.split("attn.")[1]: v.data for k, v in p.items() if k.startswith("enc.layer01.attn.")}
    q, k, v = x @ g["q.w"] + g["q.b"], x @ g["k.w"], x @ g["v.w"] + g["v.b"]
    heads = []
    for h in range(3):
        sl = slice(4 * h, 4 * h + 4)
        s = q[:, sl] @ k[:, sl].T / 2.0
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        heads.append(a @ v[:, sl])
    want = np.concatenate(heads, 1) @ g["o.w"] + g["o.b"]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_encode_taps_and_shapes(rng):
    cfg, p = _tiny()
    taps = vit.encode(Tensor(rng.standard_normal((1, 8, 8, 8))), cfg, p, "enc")
    assert sorted(taps) == [1, 2, 3, 4]
    assert all(t.shape == (8, 12) for t in taps.values())
    fmap = vit.reshape_tap(taps[4], cfg)
    assert fmap.shape == (12, 2, 2, 2)
    np.testing.assert_array_equal(vit.flatten_tap(fmap).data, taps[4].data)


def test_encode_rejects_wrong_input():
    cfg, p = _tiny()
    with pytest.raises(DimensionError):
        vit.encode(Tensor(np.zeros((1, 8, 8, 4))), cfg, p, "enc")


def test_position_embedding_init_scale():
    cfg = vit.EncoderConfig(32, 4, 1, 64, 4, 4)
    p = vit.init_encoder_params(cfg, Initializer(0), "e")
    assert abs(p["e.pos_embed"].data.std() - 0.02) < 0.002
    assert p["e.layer01.ln1.g"].data.tolist() == [1.0] * 64


def test_pre_norm_layer_identity_when_sublayers_zeroed(rng):
    cfg, p = _tiny()
    for k in ("attn.o.w", "attn.o.b", "mlp2.w", "mlp2.b"):
        p[f"enc.layer01.{k}"].data[...] = 0
    x = rng.standard_normal((8, 12))
    np.testing.assert_array_equal(vit.transformer_layer(Tensor(x), p, "enc.layer01", 3).data, x)
