"""Integer kernels and the float-side helpers that derive their constants.

Functions named ``i_*`` and ``requant*`` are integer-only and route every
arithmetic operation through an ``ops`` object (see ``intops``).  The
``*_consts`` helpers run once at export time and may use floats.

Fixed grids:
  attention scores  int32 with unit 2**-11
  softmax outputs   int32 with unit 2**-15 (one = 32768)
  layer-norm core   normalized values with unit 2**-12
"""

from __future__ import annotations

import math

import numpy as np

from .intops import INT8_MAX, INT8_MIN, INT_OPS, IntOps

SCORE_BITS = 11
PROB_BITS = 15
PROB_ONE = 1 << PROB_BITS
LN_BITS = 12
LN_PRESHIFT = 4
MULT_BITS = 23
ERF_GRID_BITS = 9
MAX_SHIFT = 62
SCALE_FLOOR = 1e-8

# second-order exp polynomial on (-ln2, 0]
EXP_A, EXP_B, EXP_C = 0.3585, 1.353, 0.344
# second-order erf polynomial, refit by minimax for the GELU error budget
ERF_A, ERF_B = -0.25750823, -1.83062056

_SCORE_SCALE = 2.0 ** -SCORE_BITS
EXP_X0 = int(math.floor(math.log(2.0) / _SCORE_SCALE))
EXP_QB = int(math.floor(EXP_B / _SCORE_SCALE))
EXP_QC = int(math.floor(EXP_C / (EXP_A * _SCORE_SCALE ** 2)))
EXP_MAX_Z = 30


# ------------------------------------------------------------ float helpers


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def symmetric_scale(max_abs: float) -> float:
    return max(float(max_abs) / INT8_MAX, SCALE_FLOOR)


def quantize_tensor(x, scale: float) -> np.ndarray:
    """clamp(round(x / scale), -128, 127) as int8."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    q = round_half_away(np.asarray(x, dtype=np.float64) / scale)
    return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int8)


def dequantize(q, scale: float) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * scale


def quantize_bias(b, scale: float) -> np.ndarray:
    q = round_half_away(np.asarray(b, dtype=np.float64) / scale)
    return np.clip(q, -(2**31), 2**31 - 1).astype(np.int32)


def fixed_multiplier(ratio: float) -> tuple[int, int]:
    """(m, e) with m * 2**-e ~= ratio and m < 2**MULT_BITS."""
    return common_multiplier([ratio])


def common_multiplier(ratios) -> tuple[int, ...]:
    """(m_1, ..., m_n, e): one shared shift for several ratios."""
    ratios = [float(r) for r in ratios]
    if any(r < 0 or not math.isfinite(r) for r in ratios):
        raise ValueError(f"ratios must be finite and non-negative: {ratios}")
    top = max(ratios)
    if top == 0:
        return (*[0] * len(ratios), 0)
    _, exp = math.frexp(top)  # top = f * 2**exp, f in [0.5, 1)
    e = MULT_BITS - exp
    if e < 0:
        raise ValueError(f"ratio {top} too large for a right-shift multiplier")
    e = min(e, MAX_SHIFT)
    ms = [int(round_half_away(r * 2.0 ** e)) for r in ratios]
    return (*ms, e)


# ---------------------------------------------------------- integer kernels


def requant(acc, m: int, e: int, ops: IntOps = INT_OPS, saturate: bool = True):
    """round_half_away(acc * m / 2**e), saturated to int8 unless disabled."""
    v = ops.round_shift(ops.mul(acc, m), e)
    return ops.sat8(v) if saturate else v


def requant_sum(terms, e: int, ops: IntOps = INT_OPS, saturate: bool = True):
    """Several (acc, m) pairs rescaled by one shared shift, one rounding."""
    total = None
    for acc, m in terms:
        t = ops.mul(acc, m)
        total = t if total is None else ops.add(total, t)
    v = ops.round_shift(total, e)
    return ops.sat8(v) if saturate else v


def _bit_length(n, ops: IntOps):
    bits = ops.mul(n, 0)
    t = n
    while ops.any(ops.gt(t, 0)):
        bits = ops.add(bits, ops.where(ops.gt(t, 0), 1, 0))
        t = ops.rshift(t, 1)
    return bits


def i_sqrt(n, ops: IntOps = INT_OPS):
    """floor(sqrt(n)) by Newton iteration from 2**ceil(bits(n)/2)."""
    scalar = np.isscalar(n)
    n = ops.asint(n)
    if ops.any(ops.gt(0, n)):
        raise ValueError("i_sqrt of a negative number")
    half = ops.rshift(ops.add(_bit_length(n, ops), 1), 1)
    x = ops.lshift(ops.add(ops.mul(n, 0), 1), half)
    x = ops.where(ops.eq(n, 0), 1, x)
    zero = ops.eq(n, 0)
    while True:
        y = ops.rshift(ops.add(x, ops.floordiv(n, x)), 1)
        done = ops.gt(y, ops.sub(x, 1))  # y >= x
        x_next = ops.where(done, x, ops.where(zero, x, y))
        if not ops.any(ops.gt(x, x_next)):
            break
        x = x_next
    x = ops.where(ops.eq(n, 0), 0, x)
    return int(x) if scalar else x


def i_exp(x, ops: IntOps = INT_OPS):
    """exp of non-positive scores on the 2**-11 grid.

    Returns integers in units of EXP_A * 2**-22.
    """
    z = ops.floordiv(ops.neg(x), EXP_X0)
    z = ops.minimum(z, EXP_MAX_Z)
    p = ops.add(x, ops.mul(z, EXP_X0))
    t = ops.add(p, EXP_QB)
    poly = ops.add(ops.mul(t, t), EXP_QC)
    return ops.rshift(poly, z)


def i_softmax(scores, ops: IntOps = INT_OPS):
    """Row softmax of int scores (unit 2**-11); rows sum to exactly 2**15."""
    s = ops.asint(scores)
    x = ops.sub(s, ops.max(s, axis=-1, keepdims=True))
    e = i_exp(x, ops)
    cum = ops.cumsum(e, axis=-1)
    total = cum[..., -1:]
    c = ops.floordiv(ops.lshift(cum, PROB_BITS), total)
    prev = ops.mul(c, 0)
    prev[..., 1:] = c[..., :-1]
    return ops.sub(c, prev)



def gelu_consts(s_in: float) -> tuple[int, int, int]:
    """(k, q_b, q_one) for ``i_gelu`` at input scale ``s_in``.

    The erf argument x / sqrt(2) has scale s_in / sqrt(2); it is moved by
    ``k`` bits (left if positive) onto a grid with unit in
    (2**-10, 2**-9] so the polynomial breakpoint is resolved finely.
    """
    k = erf_shift(s_in)
    s = _erf_unit(s_in, k)
    q_b = int(round_half_away(ERF_B / s))
    q_one = int(round_half_away(1.0 / (abs(ERF_A) * s * s)))
    return k, q_b, q_one


def erf_shift(s_in: float) -> int:
    return int(math.ceil(math.log2(s_in / math.sqrt(2.0)) + ERF_GRID_BITS))


def _erf_unit(s_in: float, k: int) -> float:
    return s_in / math.sqrt(2.0) * 2.0 ** -k


def gelu_out_scale(s_in: float) -> float:
    s = _erf_unit(s_in, erf_shift(s_in))
    return s_in * abs(ERF_A) * s * s / 2.0


def i_erf(q, q_b: int, q_one: int, ops: IntOps = INT_OPS):
    """sign(q) * (1 - |a| (min(|q|, -b) + b)**2) in units of |a| s**2."""
    sgn = ops.sign(q)
    qa = ops.minimum(ops.abs(q), -q_b)
    t = ops.add(qa, q_b)
    return ops.mul(sgn, ops.sub(q_one, ops.mul(t, t)))


def i_gelu(q, k: int, q_b: int, q_one: int, ops: IntOps = INT_OPS):
    """q * (erf(q / sqrt 2) + 1), in the scale given by ``gelu_out_scale``."""
    q = ops.asint(q)
    arg = ops.lshift(q, k) if k >= 0 else ops.round_shift(q, -k)
    return ops.mul(q, ops.add(i_erf(arg, q_b, q_one, ops), q_one))


def ln_consts(s_x: float, gamma, beta, s_out: float, embed_dim: int, eps: float = 1e-5):
    """Integer constants for ``i_layernorm``.

    Returns (gamma_q int8, beta_q int32, eps_q, m, e, s_gamma).
    """
    s_g = symmetric_scale(np.max(np.abs(gamma)))
    g_q = quantize_tensor(gamma, s_g)
    unit = s_g * 2.0 ** -LN_BITS
    b_q = quantize_bias(beta, unit)
    d_unit = s_x / embed_dim / 2 ** LN_PRESHIFT
    eps_q = int(max(1, round(eps / (d_unit * d_unit))))
    m, e = fixed_multiplier(unit / s_out)
    return g_q, b_q, eps_q, m, e, s_g


def i_layernorm(x, gamma_q, beta_q, eps_q: int, m: int, e: int, ops: IntOps = INT_OPS):
    """Layer norm over the last axis of int8 ``x``; returns int8."""
    x = ops.asint(x)
    E = x.shape[-1]
    d = ops.sub(ops.mul(x, E), ops.sum(x, axis=-1, keepdims=True))
    d = ops.lshift(d, LN_PRESHIFT)
    var = ops.floordiv(ops.sum(ops.mul(d, d), axis=-1, keepdims=True), E)
    std = i_sqrt(ops.add(var, eps_q), ops)
    n = ops.round_div(ops.lshift(d, LN_BITS), std)
    y = ops.add(ops.mul(n, gamma_q), beta_q)
    return requant(y, m, e, ops)
