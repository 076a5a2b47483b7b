"""Fake-quantized training hooks, calibration, export and integer inference.

Quantized model file (one container, see ``containers``)::

    meta.kind    "int8_model"
    meta.config  model hyper-parameters
    meta.scales  float scale of every activation boundary and weight (documentation
                 only; int_forward never reads them)
    meta.consts  integer constants per stage:
        embed   [m_conv, m_pos, e]       x0 = rs(acc*m_conv + pos*m_pos, e)
        ln1..3  [eps, m, e]              see kernels.i_layernorm
        q,k,v,attn,ff1,ff2,rr_emb,cat_pool,cat_rr,ctx   [m, e]
        scores  [m, e]                   unsaturated, onto the 2**-11 grid
        gelu1,2 [k, q_b, q_one, m, e]    i_gelu then requant
        res1,2  [m_skip, m_branch, e]
    tensors      int8 weights (conv_w, pos_embed, rr_w, wq, wk, wv, wo, ff1_w,
                 ff2_w, head_w, ln*_g), int32 biases (conv_b, bq, bk, bv, bo,
                 ff1_b, ff2_b, head_b, ln*_b)

rs(v, e) is v / 2**e rounded half away from zero; every int8 result is
saturated to [-128, 127].  Bias of a dense layer is stored at
s_input * s_weight.  Layer-norm betas are stored at s_gamma * 2**-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..containers import read_container, write_container
from ..model import PARAM_ORDER, ModelConfig, ModelParams, NoQuant, forward_batch
from . import kernels as K
from .intops import INT_OPS, IntOps

ACT_NAMES = ("input", "embed", "ln1", "q", "k", "v", "ctx", "attn", "res1", "ln2", "ff1",
             "gelu1", "ff2", "gelu2", "res2", "ln3", "rr_in", "rr_emb", "cat")
INT8_WEIGHTS = ("conv_w", "pos_embed", "rr_w", "wq", "wk", "wv", "wo", "ff1_w", "ff2_w",
                "head_w", "ln1_g", "ln2_g", "ln3_g")
BIAS_SOURCE = {"conv_b": ("input", "conv_w"), "bq": ("ln1", "wq"), "bk": ("ln1", "wk"),
               "bv": ("ln1", "wv"), "bo": ("ctx", "wo"), "ff1_b": ("ln2", "ff1_w"),
               "ff2_b": ("gelu1", "ff2_w"), "head_b": ("cat", "head_w")}
_LN_SOURCE = {"ln1": "embed", "ln2": "res1", "ln3": "res2"}


def _fq(x, s):
    r = K.round_half_away(np.asarray(x, dtype=np.float64) / s)
    mask = (r >= K.INT8_MIN) & (r <= K.INT8_MAX)
    return np.clip(r, K.INT8_MIN, K.INT8_MAX) * s, mask


def _int(x, s):
    return K.round_half_away(np.asarray(x, dtype=np.float64) / s).astype(np.int64)


class _Observer(NoQuant):
    """Records activation ranges during float forward passes."""

    def __init__(self, momentum: float, method: str):
        if method not in ("ema", "max"):
            raise ValueError(f"unknown calibration method {method!r}")
        self.momentum, self.method, self.scales = momentum, method, {}

    def _see(self, name, x):
        new = K.symmetric_scale(np.max(np.abs(x)) if np.size(x) else 0.0)
        old = self.scales.get(name)
        if old is None:
            self.scales[name] = new
        elif self.method == "max":
            self.scales[name] = max(old, new)
        else:
            self.scales[name] = self.momentum * old + (1 - self.momentum) * new

    def act(self, name, x):
        if name != "pool":
            self._see(name, x)
        return x, None

    def layer_norm(self, name, src, x, y, gamma, beta):
        self._see(name, y)
        return y, None

    def gelu(self, name, src, z, y):
        self._see(name, y)
        return y, None


def calibrate(params: ModelParams, batches, momentum: float = 0.9, method: str = "ema") -> dict[str, float]:
    """Activation scales max|x|/127, smoothed over batches by an EMA.

    ``batches`` yields (windows, rr) pairs.  ``method="max"`` keeps the
    running maximum instead.
    """
    obs = _Observer(momentum, method)
    seen = False
    for windows, rr in batches:
        forward_batch(params, windows, rr if params.config.use_rr else None, obs)
        seen = True
    if not seen:
        raise ValueError("no calibration batches")
    return obs.scales


class FakeQuant(NoQuant):
    """Quantize-dequantize hooks mirroring ``int_forward`` stage by stage.

    Layer norm, GELU and softmax outputs are produced by the integer
    kernels themselves so the fake-quantized forward agrees with the
    exported model.  While ``training`` is set, activation scales follow
    an EMA of max|x|/127.
    """

    def __init__(self, scales: dict[str, float], momentum: float = 0.9, training: bool = False):
        missing = [n for n in ACT_NAMES if n not in scales and n not in ("rr_in", "rr_emb")]
        if missing:
            raise ValueError(f"missing activation scales: {missing}")
        self.scales = dict(scales)
        self.momentum = momentum
        self.training = training
        self.wscale: dict[str, float] = {}

    def _update(self, name, x):
        if self.training:
            new = K.symmetric_scale(np.max(np.abs(x)))
            self.scales[name] = self.momentum * self.scales[name] + (1 - self.momentum) * new

    def weight(self, name, w):
        if name in BIAS_SOURCE:
            src, wn = BIAS_SOURCE[name]
            s = self.scales[src] * self.wscale[wn]
            return (K.round_half_away(w / s) * s).astype(w.dtype)
        if name not in INT8_WEIGHTS:
            return w
        s = K.symmetric_scale(np.max(np.abs(w)))
        self.wscale[name] = s
        return _fq(w, s)[0].astype(w.dtype)

    def act(self, name, x):
        if name == "pool":
            s = self.scales["ln3"]
        else:
            self._update(name, x)
            s = self.scales[name]
        y, mask = _fq(x, s)
        return y.astype(x.dtype), mask

    def layer_norm(self, name, src, x, y, gamma, beta):
        self._update(name, y)
        s_x, s_out = self.scales[src], self.scales[name]
        g_q, b_q, eps_q, m, e, _ = K.ln_consts(s_x, gamma, beta, s_out, x.shape[-1])
        yi = K.i_layernorm(_int(x, s_x), g_q, b_q, eps_q, m, e)
        mask = np.abs(y / s_out) <= K.INT8_MAX + 0.5
        return (yi * s_out).astype(y.dtype), mask

    def gelu(self, name, src, z, y):
        self._update(name, y)
        s_z, s_out = self.scales[src], self.scales[name]
        k, q_b, q_one = K.gelu_consts(s_z)
        m, e = K.fixed_multiplier(K.gelu_out_scale(s_z) / s_out)
        gi = K.requant(K.i_gelu(_int(z, s_z), k, q_b, q_one), m, e)
        mask = np.abs(y / s_out) <= K.INT8_MAX + 0.5
        return (gi * s_out).astype(y.dtype), mask

    def scores(self, s):
        return (K.round_half_away(s * 2.0 ** K.SCORE_BITS) * 2.0 ** -K.SCORE_BITS).astype(s.dtype)

    def softmax(self, s):
        p = K.i_softmax(_int(s, 2.0 ** -K.SCORE_BITS))
        return (p * 2.0 ** -K.PROB_BITS).astype(s.dtype)


# ------------------------------------------------------------------ export


@dataclass
class QuantizedModel:
    config: ModelConfig
    scales: dict[str, float]
    tensors: dict[str, np.ndarray]
    consts: dict[str, list[int]]

    def quantize_inputs(self, windows, rr=None):
        w = K.quantize_tensor(windows, self.scales["input"])
        r = None
        if self.config.use_rr and rr is not None:
            r = K.quantize_tensor(rr, self.scales["rr_in"])
        return w, r

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        m = {"kind": "int8_model", "config": self.config.to_dict(), "scales": self.scales,
             "consts": self.consts, **(meta or {})}
        order = [n for n in PARAM_ORDER if n in self.tensors]
        write_container(path, m, {n: self.tensors[n] for n in order})

    @classmethod
    def load(cls, path: str | Path) -> tuple["QuantizedModel", dict]:
        meta, tensors = read_container(path)
        if meta.get("kind") != "int8_model":
            raise ValueError(f"{path}: not a quantized model")
        consts = {k: [int(v) for v in vals] for k, vals in meta["consts"].items()}
        return cls(ModelConfig.from_dict(meta["config"]), meta["scales"], tensors, consts), meta


def export(params: ModelParams, scales: dict[str, float]) -> QuantizedModel:
    """Freeze float parameters and activation scales into integer form."""
    cfg = params.config
    p = {n: np.asarray(params[n], dtype=np.float64) for n in params.names()}
    s = dict(scales)
    T: dict[str, np.ndarray] = {}
    C: dict[str, list[int]] = {}
    for n in INT8_WEIGHTS:
        if n in p and not n.startswith("ln"):
            s["w:" + n] = K.symmetric_scale(np.max(np.abs(p[n])))
            T[n] = K.quantize_tensor(p[n], s["w:" + n])
    for b, (src, wn) in BIAS_SOURCE.items():
        T[b] = K.quantize_bias(p[b], s[src] * s["w:" + wn])

    def dense(name, src, wn):
        C[name] = list(K.fixed_multiplier(s[src] * s["w:" + wn] / s[name]))

    C["embed"] = list(K.common_multiplier([s["input"] * s["w:conv_w"] / s["embed"],
                                           s["w:pos_embed"] / s["embed"]]))
    for ln, src in _LN_SOURCE.items():
        g_q, b_q, eps_q, m, e, s_g = K.ln_consts(s[src], p[ln + "_g"], p[ln + "_b"], s[ln],
                                                 cfg.embed_dim)
        T[ln + "_g"], T[ln + "_b"] = g_q, b_q
        s["w:" + ln + "_g"] = s_g
        C[ln] = [eps_q, m, e]
    for n, w in (("q", "wq"), ("k", "wk"), ("v", "wv")):
        dense(n, "ln1", w)
    C["scores"] = list(K.fixed_multiplier(
        s["q"] * s["k"] / math.sqrt(cfg.head_dim) * 2.0 ** K.SCORE_BITS))
    C["ctx"] = list(K.fixed_multiplier(2.0 ** -K.PROB_BITS * s["v"] / s["ctx"]))
    dense("attn", "ctx", "wo")
    C["res1"] = list(K.common_multiplier([s["embed"] / s["res1"], s["attn"] / s["res1"]]))
    dense("ff1", "ln2", "ff1_w")
    dense("ff2", "gelu1", "ff2_w")
    for g, src in (("gelu1", "ff1"), ("gelu2", "ff2")):
        C[g] = [*K.gelu_consts(s[src]), *K.fixed_multiplier(K.gelu_out_scale(s[src]) / s[g])]
    C["res2"] = list(K.common_multiplier([s["res1"] / s["res2"], s["gelu2"] / s["res2"]]))
    C["cat_pool"] = list(K.fixed_multiplier(s["ln3"] / s["cat"]))
    if cfg.use_rr:
        dense("rr_emb", "rr_in", "rr_w")
        C["cat_rr"] = list(K.fixed_multiplier(s["rr_emb"] / s["cat"]))
    scales_out = {k: float(v) for k, v in s.items()}
    return QuantizedModel(cfg, scales_out, T, {k: [int(v) for v in c] for k, c in C.items()})


# --------------------------------------------------------------- inference


def _heads(x, H):
    B, S, E = x.shape
    return x.reshape(B, S, H, E // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, S, P = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * P)


def int_forward(window_q, rr_q, qm: QuantizedModel, ops: IntOps = INT_OPS) -> np.ndarray:
    """int32 logits from int8 inputs using integer arithmetic only.

    Accepts a single window (L,) or a batch (B, L); ``rr_q`` matches.
    """
    cfg, T, C = qm.config, qm.tensors, qm.consts
    single = np.ndim(window_q) == 1
    x = ops.asint(window_q)
    if single:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != cfg.input_len:
        raise ValueError(f"window must have length {cfg.input_len}")
    B, S, k, H = x.shape[0], cfg.seq_len, cfg.kernel, cfg.heads

    acc = ops.add(ops.matmul(x.reshape(B, S, k), T["conv_w"]), T["conv_b"])
    m_c, m_p, e = C["embed"]
    x0 = K.requant_sum([(acc, m_c), (T["pos_embed"].T, m_p)], e, ops)

    a = K.i_layernorm(x0, T["ln1_g"], T["ln1_b"], *C["ln1"], ops)
    qq, kk, vv = (K.requant(ops.add(ops.matmul(a, T[w]), T[b]), *C[n], ops)
                  for n, w, b in (("q", "wq", "bq"), ("k", "wk", "bk"), ("v", "wv", "bv")))
    Qh, Kh, Vh = _heads(qq, H), _heads(kk, H), _heads(vv, H)
    sc = ops.matmul(Qh, Kh.transpose(0, 1, 3, 2))
    sc = ops.sat32(K.requant(sc, *C["scores"], ops, saturate=False))
    A = K.i_softmax(sc, ops)
    ctx = K.requant(_merge(ops.matmul(A, Vh)), *C["ctx"], ops)
    att = K.requant(ops.add(ops.matmul(ctx, T["wo"]), T["bo"]), *C["attn"], ops)
    m_s, m_b, e = C["res1"]
    x1 = K.requant_sum([(x0, m_s), (att, m_b)], e, ops)

    f = K.i_layernorm(x1, T["ln2_g"], T["ln2_b"], *C["ln2"], ops)
    z1 = K.requant(ops.add(ops.matmul(f, T["ff1_w"]), T["ff1_b"]), *C["ff1"], ops)
    kk1, qb1, qo1, m1, e1 = C["gelu1"]
    g1 = K.requant(K.i_gelu(z1, kk1, qb1, qo1, ops), m1, e1, ops)
    z2 = K.requant(ops.add(ops.matmul(g1, T["ff2_w"]), T["ff2_b"]), *C["ff2"], ops)
    kk2, qb2, qo2, m2, e2 = C["gelu2"]
    g2 = K.requant(K.i_gelu(z2, kk2, qb2, qo2, ops), m2, e2, ops)
    m_s, m_b, e = C["res2"]
    x2 = K.requant_sum([(x1, m_s), (g2, m_b)], e, ops)

    y3 = K.i_layernorm(x2, T["ln3_g"], T["ln3_b"], *C["ln3"], ops)
    pooled = ops.round_div(ops.sum(y3, axis=1), S)
    feats = [K.requant(pooled, *C["cat_pool"], ops)]
    if cfg.use_rr:
        if rr_q is None:
            raise ValueError("model uses RR features but rr_q is None")
        r = ops.asint(rr_q).reshape(B, cfg.rr_dim)
        r = K.requant(ops.matmul(r, T["rr_w"].T), *C["rr_emb"], ops)
        feats.append(K.requant(r, *C["cat_rr"], ops))
    cat = np.concatenate(feats, axis=1)
    logits = ops.sat32(ops.add(ops.matmul(cat, T["head_w"]), T["head_b"])).astype(np.int32)
    return logits[0] if single else logits


def int_predict(qm: QuantizedModel, windows, rr=None, batch_size: int = 1024) -> np.ndarray:
    """Quantize float inputs and run ``int_forward`` in chunks."""
    outs = []
    for i in range(0, len(windows), batch_size):
        w, r = qm.quantize_inputs(windows[i:i + batch_size],
                                  None if rr is None else rr[i:i + batch_size])
        outs.append(int_forward(w, r, qm))
    if not outs:
        return np.zeros((0, qm.config.classes), dtype=np.int32)
    return np.concatenate(outs)


def fq_predict(params: ModelParams, scales: dict[str, float], windows, rr=None,
               batch_size: int = 1024) -> np.ndarray:
    """Logits of the fake-quantized float model with frozen scales."""
    fq = FakeQuant(scales)
    p64 = params.astype(np.float64)
    outs = []
    for i in range(0, len(windows), batch_size):
        r = None if rr is None or not params.config.use_rr else rr[i:i + batch_size]
        outs.append(forward_batch(p64, np.asarray(windows[i:i + batch_size], np.float64), r, fq)[0])
    if not outs:
        return np.zeros((0, params.config.classes))
    return np.concatenate(outs)


def qat_finetune(params: ModelParams, scales: dict[str, float], train_data, valid_data,
                 config=None, epochs: int = 15, lr_divisor: float = 10.0, log_path=None):
    """Fake-quantized fine-tuning, then export.

    Returns (QuantizedModel, TrainResult).  The learning rate is the float
    run's initial rate divided by ``lr_divisor``.
    """
    from ..training import TrainConfig, train

    base = config or TrainConfig()
    qcfg = TrainConfig.from_dict({**base.to_dict(), "epochs": epochs,
                                  "lr0": base.lr0 / lr_divisor,
                                  "min_lr": min(base.min_lr, base.lr0 / lr_divisor)})
    fq = FakeQuant(scales)
    res = train(qcfg, train_data, valid_data, init=params, fq=fq, log_path=log_path)
    return export(res.params, res.quant_scales or fq.scales), res
