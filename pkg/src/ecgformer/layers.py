"""Batched layer primitives with hand-written backward passes.

Activations are laid out (batch, sequence, embedding). Every ``*_forward``
returns ``(out, cache)`` and the matching ``*_backward`` takes the upstream
gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def dense_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w)


def dense_backward(dy, cache, bias=True):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(0) if bias else None
    return dx, dw, db


def conv_embed_forward(window, w, b, pos):
    """Non-overlapping 1-D convolution (stride = kernel) plus positional table.

    window (B, L); w (k, E); b (E,); pos (E, S) -> (B, S, E)
    """
    k = w.shape[0]
    B, L = window.shape
    if L % k:
        raise ValueError(f"input length {L} not divisible by kernel {k}")
    patches = window.reshape(B, L // k, k)
    y = patches @ w + b + pos.T
    return y, (patches, w)


def conv_embed_backward(dy, cache):
    patches, w = cache
    B, S, k = patches.shape
    dw = patches.reshape(-1, k).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.sum((0, 1))
    dpos = dy.sum(0).T
    dwindow = (dy @ w.T).reshape(B, S * k)
    return dwindow, dw, db, dpos


def layer_norm_forward(x, g, b, eps=LN_EPS):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    return dy * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def softmax(s, axis=-1):
    z = s - s.max(axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis, keepdims=True)


def split_heads(x, heads):
    B, S, E = x.shape
    return x.reshape(B, S, heads, E // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    B, H, S, P = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, H * P)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n
