"""Single-block transformer beat classifier and its analytic cost model.

Forward and backward passes are written by hand over numpy. The batched
path (``forward_batch`` / ``backward_batch``) works in (B, S, E) layout;
the per-sample helpers (``conv_embed``, ``attention``, ``layer_norm``,
``forward``) take and return (E, S) activations.

``forward_batch`` accepts an optional fake-quantizer.  When given, every
tensor that the integer pipeline stores as int8 is rounded onto its grid
and the backward pass applies the straight-through masks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .containers import read_container, write_container

PARAM_ORDER = (
    "conv_w", "conv_b", "pos_embed", "rr_w",
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
    "ln3_g", "ln3_b", "head_w", "head_b",
)


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = 198
    embed_dim: int = 16
    kernel: int = 3
    heads: int = 8
    hidden: int = 128
    classes: int = 5
    rr_dim: int = 2
    use_rr: bool = True

    def __post_init__(self):
        for name in ("input_len", "embed_dim", "kernel", "heads", "hidden", "classes", "rr_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.input_len % self.kernel:
            raise ValueError(f"input_len {self.input_len} not divisible by kernel {self.kernel}")

    @property
    def seq_len(self) -> int:
        return self.input_len // self.kernel

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def head_in(self) -> int:
        return self.embed_dim + (self.rr_dim if self.use_rr else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    E, S, k, h, C, R = cfg.embed_dim, cfg.seq_len, cfg.kernel, cfg.hidden, cfg.classes, cfg.rr_dim
    shapes = {
        "conv_w": (k, E), "conv_b": (E,), "pos_embed": (E, S), "rr_w": (R, R),
        "ln1_g": (E,), "ln1_b": (E,),
        "wq": (E, E), "bq": (E,), "wk": (E, E), "bk": (E,),
        "wv": (E, E), "bv": (E,), "wo": (E, E), "bo": (E,),
        "ln2_g": (E,), "ln2_b": (E,),
        "ff1_w": (E, h), "ff1_b": (h,), "ff2_w": (h, E), "ff2_b": (E,),
        "ln3_g": (E,), "ln3_b": (E,),
        "head_w": (cfg.head_in, C), "head_b": (C,),
    }
    if not cfg.use_rr:
        del shapes["rr_w"]
    return shapes


@dataclass
class ModelParams:
    """Named float tensors plus the config that shaped them."""

    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = set(shapes) ^ set(self.tensors)
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        for name, shp in shapes.items():
            if self.tensors[name].shape != shp:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shp}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return [n for n in PARAM_ORDER if n in self.tensors]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        m = {"kind": "float_checkpoint", "config": self.config.to_dict(), **(meta or {})}
        write_container(path, m, {n: self.tensors[n].astype("<f4") for n in self.names()})

    @classmethod
    def load(cls, path: str | Path, dtype=np.float64) -> tuple["ModelParams", dict]:
        meta, tensors = read_container(path)
        if meta.get("kind") != "float_checkpoint":
            raise ValueError(f"{path}: not a float checkpoint")
        cfg = ModelConfig.from_dict(meta["config"])
        return cls(cfg, {k: v.astype(dtype) for k, v in tensors.items()}), meta


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit LN gains, N(0, 0.02) positions."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shp in param_shapes(cfg).items():
        if name == "pos_embed":
            out[name] = rng.normal(0.0, 0.02, shp)
        elif name.endswith("_g"):
            out[name] = np.ones(shp)
        elif len(shp) == 2:
            lim = np.sqrt(6.0 / (shp[0] + shp[1]))
            out[name] = rng.uniform(-lim, lim, shp)
        else:
            out[name] = np.zeros(shp)
    return ModelParams(cfg, {k: v.astype(dtype) for k, v in out.items()})


# ------------------------------------------------------------------ batched


class NoQuant:
    """Quantizer hooks that leave every tensor untouched.

    Subclasses override these to round tensors onto integer grids.
    ``act`` and the op-specific hooks return ``(value, ste_mask)``; a mask
    of ``None`` means the gradient passes unchanged.
    """

    def weight(self, name, w):
        return w

    def act(self, name, x):
        return x, None

    def layer_norm(self, name, src, x, y, gamma, beta):
        return y, None

    def gelu(self, name, src, z, y):
        return y, None

    def scores(self, s):
        return s

    def softmax(self, s):
        return L.softmax(s)


_IDENT = NoQuant()


def _mask(g, m):
    return g if m is None else g * m


def forward_batch(params: ModelParams, windows: np.ndarray, rr: np.ndarray | None = None,
                  fq=None) -> tuple[np.ndarray, dict]:
    """Logits (B, C) and the cache needed by ``backward_batch``."""
    cfg = params.config
    q = fq or _IDENT
    p = {n: q.weight(n, params[n]) for n in params.names()}
    windows = np.asarray(windows, dtype=params["conv_w"].dtype)
    if windows.ndim != 2 or windows.shape[1] != cfg.input_len:
        raise ValueError(f"windows must be (B, {cfg.input_len}), got {windows.shape}")
    B = windows.shape[0]
    c: dict = {"p": p, "m": {}}
    m = c["m"]

    xin, m["input"] = q.act("input", windows)
    x0, c["conv"] = L.conv_embed_forward(xin, p["conv_w"], p["conv_b"], p["pos_embed"])
    x0, m["embed"] = q.act("embed", x0)

    # attention
    a_in, c["ln1"] = L.layer_norm_forward(x0, p["ln1_g"], p["ln1_b"])
    a_in, m["ln1"] = q.layer_norm("ln1", "embed", x0, a_in, p["ln1_g"], p["ln1_b"])
    qq, c["q"] = L.dense_forward(a_in, p["wq"], p["bq"])
    kk, c["k"] = L.dense_forward(a_in, p["wk"], p["bk"])
    vv, c["v"] = L.dense_forward(a_in, p["wv"], p["bv"])
    qq, m["q"] = q.act("q", qq)
    kk, m["k"] = q.act("k", kk)
    vv, m["v"] = q.act("v", vv)
    Qh, Kh, Vh = (L.split_heads(t, cfg.heads) for t in (qq, kk, vv))
    scale = 1.0 / np.sqrt(cfg.head_dim)
    scores = q.scores((Qh @ Kh.transpose(0, 1, 3, 2)) * scale)
    A = q.softmax(scores)
    ctx = L.merge_heads(A @ Vh)
    ctx, m["ctx"] = q.act("ctx", ctx)
    att, c["o"] = L.dense_forward(ctx, p["wo"], p["bo"])
    att, m["attn"] = q.act("attn", att)
    c["heads"] = (Qh, Kh, Vh, A, scale)
    x1, m["res1"] = q.act("res1", x0 + att)

    # feed-forward
    f_in, c["ln2"] = L.layer_norm_forward(x1, p["ln2_g"], p["ln2_b"])
    f_in, m["ln2"] = q.layer_norm("ln2", "res1", x1, f_in, p["ln2_g"], p["ln2_b"])
    z1, c["ff1"] = L.dense_forward(f_in, p["ff1_w"], p["ff1_b"])
    z1, m["ff1"] = q.act("ff1", z1)
    g1, c["g1"] = L.gelu_forward(z1)
    g1, m["gelu1"] = q.gelu("gelu1", "ff1", z1, g1)
    z2, c["ff2"] = L.dense_forward(g1, p["ff2_w"], p["ff2_b"])
    z2, m["ff2"] = q.act("ff2", z2)
    g2, c["g2"] = L.gelu_forward(z2)
    g2, m["gelu2"] = q.gelu("gelu2", "ff2", z2, g2)
    x2, m["res2"] = q.act("res2", x1 + g2)

    # head
    y3, c["ln3"] = L.layer_norm_forward(x2, p["ln3_g"], p["ln3_b"])
    y3, m["ln3"] = q.layer_norm("ln3", "res2", x2, y3, p["ln3_g"], p["ln3_b"])
    pooled, m["pool"] = q.act("pool", y3.mean(1))
    feats = [pooled]
    if cfg.use_rr:
        if rr is None:
            raise ValueError("model uses RR features but rr is None")
        rr = np.asarray(rr, dtype=pooled.dtype).reshape(B, cfg.rr_dim)
        rr_q, m["rr_in"] = q.act("rr_in", rr)
        rr_emb, c["rr"] = L.dense_forward(rr_q, p["rr_w"].T)
        rr_emb, m["rr_emb"] = q.act("rr_emb", rr_emb)
        feats.append(rr_emb)
    cat, m["cat"] = q.act("cat", np.concatenate(feats, axis=1))
    logits, c["head"] = L.dense_forward(cat, p["head_w"], p["head_b"])
    c["S"] = cfg.seq_len
    return logits, c


def backward_batch(dlogits: np.ndarray, cache: dict, config: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of every parameter given d(loss)/d(logits)."""
    m, g = cache["m"], {}
    E = config.embed_dim

    dcat, g["head_w"], g["head_b"] = L.dense_backward(dlogits, cache["head"])
    dcat = _mask(dcat, m["cat"])
    dpool = _mask(dcat[:, :E], m["pool"])
    if config.use_rr:
        drr = _mask(dcat[:, E:], m["rr_emb"])
        _, dwt, _ = L.dense_backward(drr, cache["rr"], bias=False)
        g["rr_w"] = dwt.T
    dy3 = np.repeat(dpool[:, None, :] / cache["S"], cache["S"], axis=1)
    dy3 = _mask(dy3, m["ln3"])
    dx2, g["ln3_g"], g["ln3_b"] = L.layer_norm_backward(dy3, cache["ln3"])
    dx2 = _mask(dx2, m["res2"])

    dg2 = _mask(dx2, m["gelu2"])
    dz2 = _mask(L.gelu_backward(dg2, cache["g2"]), m["ff2"])
    dg1, g["ff2_w"], g["ff2_b"] = L.dense_backward(dz2, cache["ff2"])
    dg1 = _mask(dg1, m["gelu1"])
    dz1 = _mask(L.gelu_backward(dg1, cache["g1"]), m["ff1"])
    df_in, g["ff1_w"], g["ff1_b"] = L.dense_backward(dz1, cache["ff1"])
    df_in = _mask(df_in, m["ln2"])
    dx1_ln, g["ln2_g"], g["ln2_b"] = L.layer_norm_backward(df_in, cache["ln2"])
    dx1 = _mask(dx2 + dx1_ln, m["res1"])

    datt = _mask(dx1, m["attn"])
    dctx, g["wo"], g["bo"] = L.dense_backward(datt, cache["o"])
    dctx = _mask(dctx, m["ctx"])
    Qh, Kh, Vh, A, scale = cache["heads"]
    dC = L.split_heads(dctx, config.heads)
    dA = dC @ Vh.transpose(0, 1, 3, 2)
    dVh = A.transpose(0, 1, 3, 2) @ dC
    dS = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
    dQh = dS @ Kh
    dKh = dS.transpose(0, 1, 3, 2) @ Qh
    dq = _mask(L.merge_heads(dQh), m["q"])
    dk = _mask(L.merge_heads(dKh), m["k"])
    dv = _mask(L.merge_heads(dVh), m["v"])
    da_q, g["wq"], g["bq"] = L.dense_backward(dq, cache["q"])
    da_k, g["wk"], g["bk"] = L.dense_backward(dk, cache["k"])
    da_v, g["wv"], g["bv"] = L.dense_backward(dv, cache["v"])
    da_in = _mask(da_q + da_k + da_v, m["ln1"])
    dx0_ln, g["ln1_g"], g["ln1_b"] = L.layer_norm_backward(da_in, cache["ln1"])
    dx0 = _mask(dx1 + dx0_ln, m["embed"])
    _, g["conv_w"], g["conv_b"], g["pos_embed"] = L.conv_embed_backward(dx0, cache["conv"])
    return g


def predict(params: ModelParams, windows: np.ndarray, rr: np.ndarray | None = None,
            batch_size: int = 1024) -> np.ndarray:
    """Logits for many beats, evaluated in chunks."""
    outs = []
    for i in range(0, len(windows), batch_size):
        r = None if rr is None else rr[i:i + batch_size]
        outs.append(forward_batch(params, windows[i:i + batch_size], r)[0])
    if not outs:
        return np.zeros((0, params.config.classes))
    return np.concatenate(outs)


# --------------------------------------------------------------- per sample


def conv_embed(window: np.ndarray, params: ModelParams) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (params.config.input_len,):
        raise ValueError(f"window must have shape ({params.config.input_len},), got {window.shape}")
    y, _ = L.conv_embed_forward(window[None], params["conv_w"], params["conv_b"], params["pos_embed"])
    return y[0].T


def attention(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Multi-head self-attention on an (E, S) activation, without residual."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != cfg.embed_dim:
        raise ValueError(f"expected ({cfg.embed_dim}, S) activation, got {x.shape}")
    t = x.T[None]
    Qh, Kh, Vh = (L.split_heads(L.dense_forward(t, params[w], params[b])[0], cfg.heads)
                  for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")))
    A = L.softmax(Qh @ Kh.transpose(0, 1, 3, 2) / np.sqrt(cfg.head_dim))
    ctx = L.merge_heads(A @ Vh)
    return (ctx @ params["wo"] + params["bo"])[0].T


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = L.LN_EPS) -> np.ndarray:
    """Normalize each column of an (E, S) activation over E."""
    x = np.asarray(x, dtype=np.float64)
    return L.layer_norm_forward(x.T, gamma, beta, eps)[0].T


def gelu(x):
    return L.gelu_forward(np.asarray(x, dtype=np.float64))[0]


def forward(window: np.ndarray, rr_norm: np.ndarray | None, params: ModelParams) -> np.ndarray:
    """Five logits for one beat window and its two normalized RR features."""
    cfg = params.config
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (cfg.input_len,):
        raise ValueError(f"window must have shape ({cfg.input_len},), got {window.shape}")
    rr = None
    if cfg.use_rr:
        rr = np.asarray(rr_norm, dtype=np.float64)
        if rr.shape != (cfg.rr_dim,):
            raise ValueError(f"rr_norm must have shape ({cfg.rr_dim},), got {rr.shape}")
        rr = rr[None]
    return forward_batch(params, window[None], rr)[0][0]


# --------------------------------------------------------------- cost model


def count_params(cfg: ModelConfig) -> int:
    E, S, k, h, C, R = cfg.embed_dim, cfg.seq_len, cfg.kernel, cfg.hidden, cfg.classes, cfg.rr_dim
    n = k * E + E                 # conv
    n += E * S                    # positional table
    n += R * R if cfg.use_rr else 0
    n += 3 * 2 * E                # three layer norms
    n += 4 * (E * E + E)          # Q, K, V, O
    n += E * h + h + h * E + E    # feed-forward
    n += cfg.head_in * C + C      # classifier
    return n


def count_macs(cfg: ModelConfig) -> int:
    E, S, k, h, C, H, P = (cfg.embed_dim, cfg.seq_len, cfg.kernel, cfg.hidden,
                           cfg.classes, cfg.heads, cfg.head_dim)
    macs = S * E * k              # conv
    macs += 3 * S * E * E         # Q, K, V
    macs += 2 * H * S * S * P     # scores and context
    macs += S * E * E             # output projection
    macs += 2 * S * E * h         # feed-forward
    macs += cfg.head_in * C
    if cfg.use_rr:
        macs += cfg.rr_dim * cfg.rr_dim
    return macs


def footprint_bytes(cfg: ModelConfig) -> int:
    """int8 weights plus peak working memory of the integer kernels.

    The peak is at the attention stage: all H score maps (int8, S x S),
    seven int8 E x S buffers (residual input, normalized input, Q, K, V,
    context, projection output), 32-bit layer-norm constants for the three
    norms, one token's FFN hidden vector, and the logits.
    """
    E, S, h, C, H = cfg.embed_dim, cfg.seq_len, cfg.hidden, cfg.classes, cfg.heads
    return count_params(cfg) + H * S * S + 7 * E * S + 3 * 2 * 4 * E + h + C


def count_ops_and_memory(cfg: ModelConfig) -> tuple[float, int]:
    """(mega-operations per inference, footprint in bytes)."""
    return 2 * count_macs(cfg) / 1e6, footprint_bytes(cfg)
