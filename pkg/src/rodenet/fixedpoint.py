"""Q20 fixed-point arithmetic matching the programmable-logic datapath.

Values are 32-bit signed integers with 20 fractional bits (Q11.20).  Every
operation rounds to nearest with ties away from zero and saturates at
``+/-RAW_MAX`` instead of wrapping.

Two layers are provided: the :class:`FixedQ20` scalar (exact, Python ints)
and vectorised helpers over ``int64`` numpy arrays of raw values, used by the
fixed-point convolution and batch-norm kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FRAC_BITS = 20
ONE = 1 << FRAC_BITS
RAW_MAX = (1 << 31) - 1
RAW_MIN = -(1 << 31)
# saturation is symmetric so |saturated| is always RAW_MAX
SAT_LOW = -RAW_MAX
ULP = 1.0 / ONE


class FixedPointError(ArithmeticError):
    """Contract violation in Q20 arithmetic (NaN input, x/0, sqrt of negative)."""


def saturate(raw: int) -> int:
    if raw > RAW_MAX:
        return RAW_MAX
    if raw < SAT_LOW:
        return SAT_LOW
    return raw


def round_shift(value: int, shift: int) -> int:
    """Divide by ``2**shift``, rounding to nearest, ties away from zero."""
    if shift <= 0:
        return value << -shift
    half = 1 << (shift - 1)
    if value >= 0:
        return (value + half) >> shift
    return -((-value + half) >> shift)


def round_div(num: int, den: int) -> int:
    """Integer ``num / den`` rounded to nearest, ties away from zero."""
    if den == 0:
        raise FixedPointError("division by zero")
    neg = (num < 0) != (den < 0)
    n, d = abs(num), abs(den)
    q = (2 * n + d) // (2 * d)
    return -q if neg else q


def isqrt_newton(v: int) -> int:
    """floor(sqrt(v)) by integer Newton iteration."""
    if v < 0:
        raise FixedPointError("square root of a negative value")
    if v < 2:
        return v
    x = 1 << ((v.bit_length() + 1) // 2)  # initial guess >= sqrt(v)
    while True:
        y = (x + v // x) >> 1
        if y >= x:
            return x
        x = y


def raw_from_float(x: float) -> int:
    if math.isnan(x):
        raise FixedPointError("cannot convert NaN to Q20")
    if math.isinf(x):
        return RAW_MAX if x > 0 else SAT_LOW
    scaled = abs(x) * ONE
    if scaled >= RAW_MAX:
        return RAW_MAX if x > 0 else SAT_LOW
    mag = math.floor(scaled + 0.5)
    return -mag if x < 0 else mag


@dataclass(frozen=True, order=True)
class FixedQ20:
    """Q11.20 scalar. ``raw / 2**20`` is the represented value."""

    raw: int

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise FixedPointError(f"raw value {self.raw} outside 32-bit range")

    @classmethod
    def from_float(cls, x: float) -> "FixedQ20":
        return cls(raw_from_float(float(x)))

    def to_float(self) -> float:
        return self.raw / ONE

    __float__ = to_float

    def __add__(self, other: "FixedQ20") -> "FixedQ20":
        return FixedQ20(saturate(self.raw + other.raw))

    def __sub__(self, other: "FixedQ20") -> "FixedQ20":
        return FixedQ20(saturate(self.raw - other.raw))

    def __neg__(self) -> "FixedQ20":
        return FixedQ20(saturate(-self.raw))

    def __mul__(self, other: "FixedQ20") -> "FixedQ20":
        return q20_mul(self, other)

    def __truediv__(self, other: "FixedQ20") -> "FixedQ20":
        return q20_div(self, other)

    def sqrt(self) -> "FixedQ20":
        return q20_sqrt(self)

    def __repr__(self):
        return f"FixedQ20({self.to_float()!r}, raw={self.raw})"


def q20_from_f64(x: float) -> FixedQ20:
    """Nearest Q20 value to ``x`` (ties away from zero), saturating."""
    return FixedQ20.from_float(x)


def q20_to_f64(a: FixedQ20) -> float:
    return a.to_float()


def q20_mul(a: FixedQ20, b: FixedQ20) -> FixedQ20:
    # raw product of two int32 fits the 64-bit intermediate
    return FixedQ20(saturate(round_shift(a.raw * b.raw, FRAC_BITS)))


def q20_div(a: FixedQ20, b: FixedQ20) -> FixedQ20:
    if b.raw == 0:
        raise FixedPointError("Q20 division by zero")
    return FixedQ20(saturate(round_div(a.raw << FRAC_BITS, b.raw)))


def q20_sqrt(a: FixedQ20) -> FixedQ20:
    """Square root, rounded to the nearest representable value."""
    if a.raw < 0:
        raise FixedPointError("Q20 square root of a negative value")
    v = a.raw << FRAC_BITS
    r = isqrt_newton(v)
    # nearest: (r + 1/2)^2 = r^2 + r + 1/4
    if v - r * r > r:
        r += 1
    return FixedQ20(saturate(r))


# ---------------------------------------------------------------------------
# vectorised raw-array helpers


class SaturationCounter:
    """Counts saturated elements across fixed-point array operations."""

    def __init__(self):
        self.count = 0
        self.total = 0

    def add(self, n_saturated: int, n_total: int):
        self.count += int(n_saturated)
        self.total += int(n_total)

    @property
    def rate(self) -> float:
        return self.count / self.total if self.total else 0.0


def saturate_array(raw: np.ndarray, counter: SaturationCounter | None = None) -> np.ndarray:
    if raw.dtype == object:
        hi = raw > RAW_MAX
        lo = raw < SAT_LOW
        out = raw.copy()
        out[hi] = RAW_MAX
        out[lo] = SAT_LOW
        out = out.astype(np.int64)
    else:
        hi = raw > RAW_MAX
        lo = raw < SAT_LOW
        out = np.clip(raw, SAT_LOW, RAW_MAX).astype(np.int64)
    if counter is not None:
        counter.add(np.count_nonzero(hi) + np.count_nonzero(lo), raw.size)
    return out


def round_shift_array(acc: np.ndarray, shift: int = FRAC_BITS) -> np.ndarray:
    """Elementwise :func:`round_shift` for int64 or object arrays."""
    half = 1 << (shift - 1)
    mag = np.abs(acc)
    if acc.dtype != object and mag.size and int(mag.max()) > np.iinfo(np.int64).max - half:
        mag = mag.astype(object)
    q = (mag + half) >> shift
    return np.where(acc < 0, -q, q)


def round_div_array(num: np.ndarray, den) -> np.ndarray:
    """Elementwise ``num / den`` rounded to nearest, ties away from zero.

    ``den`` must be a nonzero integer or an array broadcastable to ``num``.
    """
    den = np.asarray(den)
    if np.any(den == 0):
        raise FixedPointError("Q20 division by zero")
    neg = (num < 0) != (den < 0)
    n = np.abs(num).astype(object)
    d = np.abs(den).astype(object)
    q = (2 * n + d) // (2 * d)
    return np.where(neg, -q, q)


def array_from_float(x, counter: SaturationCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise FixedPointError("cannot convert NaN to Q20")
    mag = np.floor(np.minimum(np.abs(x) * ONE, float(RAW_MAX) + 1.0) + 0.5)
    raw = np.where(x < 0, -mag, mag)
    if counter is not None:
        counter.add(np.count_nonzero(np.abs(x) * ONE >= RAW_MAX + 0.5), x.size)
    return np.clip(raw, SAT_LOW, RAW_MAX).astype(np.int64)


def array_to_float(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / ONE


def add_array(a: np.ndarray, b: np.ndarray, counter: SaturationCounter | None = None) -> np.ndarray:
    return saturate_array(np.asarray(a, np.int64) + np.asarray(b, np.int64), counter)


def mul_array(a: np.ndarray, b: np.ndarray, counter: SaturationCounter | None = None) -> np.ndarray:
    prod = np.asarray(a, np.int64) * np.asarray(b, np.int64)
    return saturate_array(round_shift_array(prod), counter)
