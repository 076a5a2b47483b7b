import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

from ecgformer import layers as L
from ecgformer.model import (
    ModelConfig,
    ModelParams,
    attention,
    conv_embed,
    count_macs,
    count_ops_and_memory,
    count_params,
    footprint_bytes,
    forward,
    forward_batch,
    gelu,
    init_params,
    layer_norm,
    param_shapes,
    predict,
)

from . import oracles

DEFAULT = ModelConfig()


def random_params(cfg, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return ModelParams(cfg, {n: rng.normal(0, scale, s) for n, s in param_shapes(cfg).items()})


def as_lists(params):
    return {n: params[n].tolist() for n in params.names()}


# ------------------------------------------------------------------ config


def test_default_geometry():
    assert (DEFAULT.seq_len, DEFAULT.head_dim, DEFAULT.head_in) == (66, 2, 18)


@pytest.mark.parametrize("kw", [{"embed_dim": 15}, {"kernel": 4}, {"hidden": 0}, {"heads": -1}])
def test_config_invalid(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_params_shape_validation():
    p = init_params(DEFAULT)
    bad = dict(p.tensors, wq=np.zeros((3, 3)))
    with pytest.raises(ValueError, match="wq"):
        ModelParams(DEFAULT, bad)
    with pytest.raises(ValueError, match="mismatch"):
        ModelParams(DEFAULT, {k: v for k, v in p.tensors.items() if k != "rr_w"})


# ----------------------------------------------------------- conv embedding


def test_conv_embed_zero():
    p = init_params(DEFAULT).zeros_like()
    assert np.all(conv_embed(np.zeros(198), p) == 0)


def test_conv_embed_identity_kernel():
    p = init_params(DEFAULT).zeros_like()
    p.tensors["conv_w"][0, :] = 1.0
    out = conv_embed(np.arange(198.0), p)
    assert out.shape == (16, 66)
    assert np.array_equal(out[0], 3.0 * np.arange(66))
    assert np.array_equal(out, np.tile(3.0 * np.arange(66), (16, 1)))


def test_conv_embed_matches_oracle():
    p = random_params(DEFAULT, 1)
    w = np.random.default_rng(2).standard_normal(198)
    ref = oracles.conv_embed(w.tolist(), p["conv_w"].tolist(), p["conv_b"].tolist(), p["pos_embed"].tolist())
    assert np.max(np.abs(conv_embed(w, p) - np.array(ref))) < 1e-12


def test_conv_embed_shape_error():
    with pytest.raises(ValueError):
        conv_embed(np.zeros(197), init_params(DEFAULT))


# --------------------------------------------------------------- attention


def _small(E=4, S=6, H=2, k=2, h=8, use_rr=True):
    return ModelConfig(input_len=S * k, embed_dim=E, kernel=k, heads=H, hidden=h, use_rr=use_rr)


def test_attention_zero_query_is_mean_of_values():
    cfg = _small()
    p = random_params(cfg, 3)
    p.tensors["wq"][:] = 0
    p.tensors["bq"][:] = 0
    x = np.random.default_rng(4).standard_normal((4, 6))
    v = x.T @ p["wv"] + p["bv"]
    expected = (v.mean(0) @ p["wo"] + p["bo"])[:, None] * np.ones((1, 6))
    assert np.allclose(attention(x, p), expected, atol=1e-12)


def test_attention_single_token():
    cfg = _small(S=1)
    p = random_params(cfg, 5)
    x = np.random.default_rng(6).standard_normal((4, 1))
    v = x.T @ p["wv"] + p["bv"]
    assert np.allclose(attention(x, p), (v @ p["wo"] + p["bo"]).T, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_brute_force(seed):
    cfg = _small()
    p = random_params(cfg, seed)
    x = np.random.default_rng(100 + seed).standard_normal((4, 6))
    pl = as_lists(p)
    ref = oracles.attention(x.tolist(), pl["wq"], pl["bq"], pl["wk"], pl["bk"], pl["wv"], pl["bv"],
                            pl["wo"], pl["bo"], cfg.heads)
    assert np.max(np.abs(attention(x, p) - np.array(ref))) < 1e-12


def test_attention_default_matches_brute_force():
    p = random_params(DEFAULT, 7, scale=0.3)
    x = np.random.default_rng(8).standard_normal((16, 66))
    pl = as_lists(p)
    ref = oracles.attention(x.tolist(), pl["wq"], pl["bq"], pl["wk"], pl["bk"], pl["wv"], pl["bv"],
                            pl["wo"], pl["bo"], 8)
    assert np.max(np.abs(attention(x, p) - np.array(ref))) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_and_shift(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((3, 7)) * 10
    a = L.softmax(s)
    assert np.allclose(a.sum(-1), 1.0, atol=1e-9)
    c = rng.standard_normal((3, 1)) * 100
    assert np.allclose(L.softmax(s + c), a, atol=1e-12)


# ----------------------------------------------------------- norm and gelu


def test_layer_norm_examples():
    g, b = np.ones(16), np.zeros(16)
    assert np.allclose(layer_norm(np.full((16, 3), 4.2), g, b), 0)
    beta = np.arange(16.0)
    out = layer_norm(np.random.default_rng(0).standard_normal((16, 3)), np.zeros(16), beta)
    assert np.array_equal(out, np.tile(beta[:, None], (1, 3)))


def test_layer_norm_matches_oracle():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((16, 5)) * 3
    g, b = rng.standard_normal(16), rng.standard_normal(16)
    for t in range(5):
        ref = oracles.layer_norm_column(x[:, t].tolist(), g.tolist(), b.tolist())
        assert np.max(np.abs(layer_norm(x, g, b)[:, t] - ref)) < 1e-12


def test_gelu_values():
    assert gelu(0.0) == 0.0
    assert gelu(1.0) == pytest.approx(0.841345, abs=1e-6)
    assert gelu(1.0) == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-15)


@given(st.floats(-30, 30))
def test_gelu_reflection_identity(x):
    # x*Phi(x) - (-x)*Phi(-x) = x * (Phi(x) + Phi(-x)) = x
    assert gelu(x) - gelu(-x) == pytest.approx(x, abs=1e-12)
    assert gelu(x) + gelu(-x) == pytest.approx(x * math.erf(x / math.sqrt(2)), abs=1e-12)


# ---------------------------------------------------------------- forward


def test_forward_length_and_zero_params():
    p = init_params(DEFAULT).zeros_like()
    out = forward(np.ones(198), np.array([0.5, -0.5]), p)
    assert out.shape == (5,) and np.all(out == 0)


def test_forward_shapes_runtime():
    p = init_params(DEFAULT, 1)
    logits, cache = forward_batch(p, np.zeros((2, 198)), np.zeros((2, 2)))
    assert logits.shape == (2, 5)
    Qh, Kh, Vh, A, _ = cache["heads"]
    assert Qh.shape == (2, 8, 66, 2) and A.shape == (2, 8, 66, 66)
    assert cache["conv"] is not None


@pytest.mark.parametrize("cfg", [_small(), _small(use_rr=False), DEFAULT])
def test_forward_matches_brute_force(cfg):
    p = random_params(cfg, 11, scale=0.3)
    rng = np.random.default_rng(12)
    w = rng.standard_normal(cfg.input_len)
    rr = rng.uniform(-2, 2, 2)
    ref = oracles.forward(w.tolist(), rr.tolist(), as_lists(p), cfg.heads, cfg.use_rr)
    got = forward(w, rr if cfg.use_rr else None, p)
    assert np.max(np.abs(got - np.array(ref))) < 1e-10


def test_forward_batch_agrees_with_single():
    p = init_params(DEFAULT, 3)
    rng = np.random.default_rng(3)
    w, rr = rng.standard_normal((5, 198)), rng.uniform(-2, 2, (5, 2))
    batch = predict(p, w, rr, batch_size=2)
    for i in range(5):
        assert np.allclose(batch[i], forward(w[i], rr[i], p), atol=1e-12)


def test_forward_deterministic_across_threads():
    p = init_params(DEFAULT, 4)
    rng = np.random.default_rng(4)
    w, rr = rng.standard_normal((64, 198)), rng.uniform(-2, 2, (64, 2))
    a = predict(p, w, rr)
    with threadpool_limits(1):
        b = predict(p, w, rr)
    assert np.array_equal(a, predict(p, w, rr))
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_forward_requires_rr():
    p = init_params(DEFAULT)
    with pytest.raises(ValueError):
        forward_batch(p, np.zeros((1, 198)))
    with pytest.raises(ValueError):
        forward(np.zeros(198), np.zeros(3), p)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(DEFAULT, 2, dtype=np.float32)
    p.save(tmp_path / "m.bin", {"note": "x"})
    back, meta = ModelParams.load(tmp_path / "m.bin", dtype=np.float32)
    assert meta["note"] == "x" and back.config == DEFAULT
    for n in p.names():
        assert np.array_equal(back[n], p[n])


# ------------------------------------------------------------- cost model


def test_param_count_default():
    assert count_params(DEFAULT) == 6643
    assert init_params(DEFAULT).count() == 6643


def test_param_count_sweep_points():
    # the sweep points are counted without the RR projection
    assert count_params(ModelConfig(embed_dim=32, use_rr=False)) == 15173
    assert count_params(ModelConfig(hidden=32, use_rr=False)) == 3461


def test_param_count_brute_force_random_configs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        H = int(rng.choice([1, 2, 4, 8]))
        k = int(rng.choice([1, 2, 3, 6]))
        cfg = ModelConfig(input_len=k * int(rng.integers(1, 80)), embed_dim=H * int(rng.integers(1, 6)),
                          kernel=k, heads=H, hidden=int(rng.integers(1, 200)),
                          classes=int(rng.integers(2, 8)), use_rr=bool(rng.integers(0, 2)))
        enumerated = sum(int(np.prod(t.shape)) for t in init_params(cfg).tensors.values())
        assert count_params(cfg) == enumerated


def test_ops_and_footprint():
    mops, fp = count_ops_and_memory(DEFAULT)
    assert abs(mops - 0.97) / 0.97 < 0.15
    assert abs(fp - 49_000) / 49_000 < 0.20
    assert count_macs(DEFAULT) == 480574
    assert fp == footprint_bytes(DEFAULT) == 49400


def test_kernel_one_infeasible():
    cfg = ModelConfig(kernel=1)
    assert footprint_bytes(cfg) > 128 * 1024
    for k in (2, 3, 6):
        assert footprint_bytes(ModelConfig(kernel=k)) < 128 * 1024


def test_macs_brute_force():
    # count multiply-accumulates by walking the layers of a small config
    cfg = _small()
    E, S, k, h, H, P = 4, 6, 2, 8, 2, 2
    macs = sum(1 for _t in range(S) for _e in range(E) for _j in range(k))
    macs += sum(1 for _m in range(4) for _t in range(S) for _i in range(E) for _j in range(E))
    macs += sum(1 for _x in range(2) for _hh in range(H) for _t in range(S) for _u in range(S) for _p in range(P))
    macs += sum(1 for _t in range(S) for _i in range(E) for _j in range(h)) * 2
    macs += (E + 2) * 5 + 4
    assert count_macs(cfg) == macs
