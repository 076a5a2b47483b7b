"""Integer arithmetic used by every integer-only kernel.

All kernels take an ``ops`` object and perform arithmetic only through
it, so a checking implementation can prove that no floating-point value
ever reaches the integer path.  Intermediates are held in int64.
"""

from __future__ import annotations

import numpy as np

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


class IntOps:
    """Plain numpy integer arithmetic (int64 intermediates)."""

    def asint(self, x):
        return np.asarray(x, dtype=np.int64)

    def add(self, a, b):
        return np.add(a, b, dtype=np.int64)

    def sub(self, a, b):
        return np.subtract(a, b, dtype=np.int64)

    def mul(self, a, b):
        return np.multiply(a, b, dtype=np.int64)

    def neg(self, a):
        return np.negative(self.asint(a))

    def abs(self, a):
        return np.abs(self.asint(a))

    def sign(self, a):
        return np.sign(self.asint(a))

    def matmul(self, a, b):
        return np.matmul(self.asint(a), self.asint(b))

    def floordiv(self, a, b):
        return np.floor_divide(self.asint(a), self.asint(b))

    def lshift(self, a, n):
        return np.left_shift(self.asint(a), n)

    def rshift(self, a, n):
        return np.right_shift(self.asint(a), n)

    def sum(self, a, axis=None, keepdims=False):
        return np.sum(self.asint(a), axis=axis, keepdims=keepdims)

    def cumsum(self, a, axis=-1):
        return np.cumsum(self.asint(a), axis=axis)

    def max(self, a, axis=None, keepdims=False):
        return np.max(self.asint(a), axis=axis, keepdims=keepdims)

    def minimum(self, a, b):
        return np.minimum(self.asint(a), self.asint(b))

    def maximum(self, a, b):
        return np.maximum(self.asint(a), self.asint(b))

    def clip(self, a, lo, hi):
        return np.clip(self.asint(a), lo, hi)

    def where(self, cond, a, b):
        return np.where(cond, self.asint(a), self.asint(b))

    def gt(self, a, b):
        return np.greater(self.asint(a), self.asint(b))

    def eq(self, a, b):
        return np.equal(self.asint(a), self.asint(b))

    def any(self, a):
        return bool(np.any(a))

    # composite helpers, expressed through the primitives above

    def round_shift(self, v, e: int):
        """v / 2**e rounded half away from zero."""
        if e <= 0:
            return self.lshift(v, -e)
        mag = self.rshift(self.add(self.abs(v), 1 << (e - 1)), e)
        return self.mul(self.sign(v), mag)

    def round_div(self, a, b):
        """a / b rounded half away from zero, for b > 0."""
        mag = self.floordiv(self.add(self.lshift(self.abs(a), 1), b), self.lshift(b, 1))
        return self.mul(self.sign(a), mag)

    def sat8(self, v):
        return self.clip(v, INT8_MIN, INT8_MAX)

    def sat32(self, v):
        return self.clip(v, INT32_MIN, INT32_MAX)


def _is_int_operand(x) -> bool:
    if isinstance(x, (bool, np.bool_)):
        return True
    if isinstance(x, (int, np.integer)):
        return True
    if isinstance(x, np.ndarray):
        return x.dtype.kind in "iub"
    if isinstance(x, (list, tuple)):
        return all(_is_int_operand(v) for v in x)
    return False


class CheckedIntOps(IntOps):
    """``IntOps`` that rejects any non-integer operand and guards int64 overflow.

    ``calls`` counts primitive invocations so tests can confirm the path
    was actually exercised.
    """

    _PRIMS = ("asint", "add", "sub", "mul", "neg", "abs", "sign", "matmul", "floordiv",
              "lshift", "rshift", "sum", "cumsum", "max", "minimum", "maximum", "clip",
              "where", "gt", "eq", "any")

    def __init__(self):
        self.calls = 0

    def __getattribute__(self, name):
        attr = object.__getattribute__(self, name)
        if name not in CheckedIntOps._PRIMS:
            return attr

        def checked(*args, **kwargs):
            for a in list(args) + [v for k, v in kwargs.items() if k not in ("axis", "keepdims")]:
                if a is None:
                    continue
                if not _is_int_operand(a):
                    raise TypeError(f"non-integer operand to {name}: {type(a).__name__} "
                                    f"{getattr(a, 'dtype', '')}")
            if name in ("mul", "lshift", "matmul"):
                _overflow_guard(name, args)
            self.calls += 1
            out = attr(*args, **kwargs)
            if isinstance(out, np.ndarray) and out.dtype.kind not in "iub":
                raise TypeError(f"{name} produced {out.dtype}")
            return out

        return checked


def _bound(x) -> int:
    a = np.asarray(x)
    if a.size == 0:
        return 0
    return int(np.max(np.abs(a.astype(object)))) if a.dtype.kind in "iu" else 1


def _overflow_guard(name, args):
    a, b = args[0], args[1]
    if name == "lshift":
        lim = _bound(a) << int(np.max(b))
    elif name == "matmul":
        k = np.asarray(a).shape[-1]
        lim = _bound(a) * _bound(b) * k
    else:
        lim = _bound(a) * _bound(b)
    if lim >= 2**63:
        raise OverflowError(f"{name} may overflow int64 (bound {lim})")


INT_OPS = IntOps()
