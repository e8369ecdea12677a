"""Q-format numbers with saturating arithmetic.

A value x in [-1, 1] is stored as the integer mantissa round(x * 2**N).
Mantissas are capped at +/-2**N so that +/-1.0 are exactly representable.
Rounding is to nearest with ties away from zero everywhere.

Scalar functions here are the readable definition of the arithmetic; the
array helpers at the bottom are what the vectorized engine uses, and the two
are cross-checked in the tests.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class QFormat:
    """Fixed-point format with ``frac_bits`` fractional bits, range [-1, 1]."""

    frac_bits: int

    def __post_init__(self):
        if not isinstance(self.frac_bits, (int, np.integer)) or self.frac_bits < 1:
            raise ValueError(f"frac_bits must be an integer >= 1, got {self.frac_bits!r}")

    @property
    def one(self) -> int:
        return 1 << self.frac_bits

    @property
    def limit(self) -> int:
        """Largest representable mantissa magnitude."""
        return 1 << self.frac_bits

    @property
    def word_bits(self) -> int:
        """Two's-complement width needed for [-2**N, 2**N]: sign + integer bit + N."""
        return self.frac_bits + 2


class RoundingStrategy(enum.Enum):
    """Where the 2**N rescaling happens inside a convolution."""

    PER_OPERATION = "per-operation"
    AT_END = "at-end"

    @classmethod
    def parse(cls, value: "str | RoundingStrategy") -> "RoundingStrategy":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "per-operation": cls.PER_OPERATION,
            "perop": cls.PER_OPERATION,
            "per-op": cls.PER_OPERATION,
            "beginning": cls.PER_OPERATION,
            "at-end": cls.AT_END,
            "atend": cls.AT_END,
            "end": cls.AT_END,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown rounding strategy {value!r}") from None


@dataclass
class OverflowCounter:
    """Running count of saturation events; pass one per execution stream."""

    count: int = 0

    def record(self, n: int = 1) -> None:
        if n < 0:
            raise ValueError("overflow count cannot decrease")
        self.count += int(n)

    def merge(self, other: "OverflowCounter") -> "OverflowCounter":
        return OverflowCounter(self.count + other.count)


@dataclass(frozen=True)
class FxpValue:
    mantissa: int
    fmt: QFormat = field(repr=False)

    def to_float(self) -> float:
        return self.mantissa / self.fmt.one


def round_half_away(value: float) -> int:
    """Round a float to the nearest integer, ties away from zero (exactly)."""
    a = abs(value)
    q = math.floor(a)
    if a - q >= 0.5:
        q += 1
    return int(q) if value >= 0 else -int(q)


def round_shift(x: int, shift: int) -> int:
    """Exact integer ``x / 2**shift`` rounded to nearest, ties away from zero."""
    if shift <= 0:
        return x << (-shift)
    half = 1 << (shift - 1)
    if x >= 0:
        return (x + half) >> shift
    return -((-x + half) >> shift)


def _saturate(m: int, fmt: QFormat, ctr: OverflowCounter | None) -> int:
    lim = fmt.limit
    if m > lim:
        if ctr is not None:
            ctr.record()
        return lim
    if m < -lim:
        if ctr is not None:
            ctr.record()
        return -lim
    return m


def to_fixed(x: float, fmt: QFormat, ctr: OverflowCounter | None = None) -> FxpValue:
    m = round_half_away(math.ldexp(float(x), fmt.frac_bits))
    return FxpValue(_saturate(m, fmt, ctr), fmt)


def _check_same(a: FxpValue, b: FxpValue) -> QFormat:
    if a.fmt != b.fmt:
        raise ValueError(f"format mismatch: {a.fmt} vs {b.fmt}")
    return a.fmt


def fxp_add(a: FxpValue, b: FxpValue, ctr: OverflowCounter | None = None) -> FxpValue:
    fmt = _check_same(a, b)
    return FxpValue(_saturate(a.mantissa + b.mantissa, fmt, ctr), fmt)


def fxp_mul(a: FxpValue, b: FxpValue) -> FxpValue:
    # |a|, |b| <= 2**N means the rescaled product can never leave the range
    fmt = _check_same(a, b)
    return FxpValue(round_shift(a.mantissa * b.mantissa, fmt.frac_bits), fmt)


def accumulate_at_end(
    pixels: Iterable[FxpValue],
    weights: Iterable[FxpValue],
    fmt: QFormat,
    ctr: OverflowCounter | None = None,
) -> FxpValue:
    """Exact sum of raw products, one rounding, then saturation.

    Python integers are unbounded, so the accumulator never loses bits.
    """
    acc = 0
    for p, w in zip(pixels, weights, strict=True):
        if p.fmt != fmt or w.fmt != fmt:
            raise ValueError("format mismatch in accumulation")
        acc += p.mantissa * w.mantissa
    return FxpValue(_saturate(round_shift(acc, fmt.frac_bits), fmt, ctr), fmt)


def dot9(
    p: Sequence[FxpValue],
    w: Sequence[FxpValue],
    strategy: RoundingStrategy,
    ctr: OverflowCounter | None = None,
) -> FxpValue:
    """3x3 scalar product: 9 multiplications and 8 additions."""
    if len(p) != 9 or len(w) != 9:
        raise ValueError("dot9 needs exactly 9 pixels and 9 weights")
    fmt = p[0].fmt
    if strategy is RoundingStrategy.AT_END:
        return accumulate_at_end(p, w, fmt, ctr)
    acc = fxp_mul(p[0], w[0])
    for pk, wk in zip(p[1:], w[1:]):
        acc = fxp_add(acc, fxp_mul(pk, wk), ctr)
    return acc


# -- array helpers (int64) -------------------------------------------------

def round_half_away_array(v: np.ndarray) -> np.ndarray:
    a = np.abs(v)
    q = np.floor(a)
    q += (a - q) >= 0.5
    return np.where(v < 0, -q, q).astype(np.int64)


def to_fixed_array(x: np.ndarray, fmt: QFormat) -> tuple[np.ndarray, int]:
    """Vectorized ``to_fixed``; returns (mantissas, saturation count)."""
    m = round_half_away_array(np.ldexp(np.asarray(x, dtype=np.float64), fmt.frac_bits))
    return saturate_array(m, fmt)


def round_shift_array(x: np.ndarray, shift: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << (-shift)
    half = np.int64(1 << (shift - 1))
    q = (np.abs(x) + half) >> shift
    return np.where(x < 0, -q, q)


def saturate_array(m: np.ndarray, fmt: QFormat) -> tuple[np.ndarray, int]:
    lim = fmt.limit
    over = int(np.count_nonzero((m > lim) | (m < -lim)))
    if over:
        m = np.clip(m, -lim, lim)
    return m, over


def from_fixed_array(m: np.ndarray, fmt: QFormat) -> np.ndarray:
    return np.ldexp(np.asarray(m, dtype=np.float64), -fmt.frac_bits)
