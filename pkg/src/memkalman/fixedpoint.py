"""Signed sign-magnitude fixed-point numbers.

A value is stored as one sign bit plus ``B = n + m`` magnitude bits, so that

    z = (-1)^s * sum_{b=-m}^{n-1} 2^b z_b

with resolution ``2**-m`` and magnitude range ``[0, 2**n - 2**-m]``.
Scalars use :class:`FixedPointValue`; the simulator works on
:class:`FixedPointArray`, which holds integer magnitudes scaled by ``2**m``.

Rounding is to nearest with ties away from zero.  Overflow saturates unless
``overflow="extend"`` is requested, in which case magnitudes may grow past
``B`` bits (the extra integer bits are assumed to live in reliable storage).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Overflow = Literal["saturate", "extend"]

# products of two int64 magnitudes must stay below this to avoid overflow
_INT64_SAFE = 1 << 62


@dataclass(frozen=True)
class FixedPointFormat:
    """Q-format descriptor: ``n`` integer bits, ``m`` fractional bits."""

    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or self.m < 0:
            raise ValueError(f"n and m must be >= 0, got n={self.n}, m={self.m}")
        if self.n + self.m < 1:
            raise ValueError("a format needs at least one magnitude bit")

    @property
    def bits(self) -> int:
        """Number of magnitude bits ``B = n + m`` (sign bit excluded)."""
        return self.n + self.m

    @property
    def step(self) -> float:
        return 2.0 ** -self.m

    @property
    def max_magnitude(self) -> int:
        """Largest magnitude as an integer count of steps, ``2**B - 1``."""
        return (1 << self.bits) - 1

    @property
    def max_real(self) -> float:
        return 2.0 ** self.n - 2.0 ** -self.m

    @property
    def positions(self) -> np.ndarray:
        """Bit significances ``b = -m, ..., n-1`` in storage order."""
        return np.arange(-self.m, self.n)

    def __str__(self):
        return f"Q{self.n}.{self.m}"


def quantization_noise_variance(fmt: FixedPointFormat) -> float:
    """Variance ``2**(-2m) / 12`` of uniform rounding noise at resolution ``2**-m``."""
    return 2.0 ** (-2 * fmt.m) / 12.0


@dataclass(frozen=True)
class FixedPointValue:
    sign: int
    magnitude: int
    fmt: FixedPointFormat
    saturated: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        if not 0 <= self.magnitude <= self.fmt.max_magnitude:
            raise ValueError(
                f"magnitude {self.magnitude} does not fit in {self.fmt.bits} bits")

    def to_real(self) -> float:
        return float(self.sign * self.magnitude) * 2.0 ** -self.fmt.m \
            if self.magnitude else (-0.0 if self.sign < 0 else 0.0)

    def bit(self, b: int) -> int:
        """Stored bit ``z_b`` for significance ``b`` in ``[-m, n-1]``."""
        if not -self.fmt.m <= b < self.fmt.n:
            raise IndexError(f"bit {b} outside [{-self.fmt.m}, {self.fmt.n - 1}]")
        return (self.magnitude >> (b + self.fmt.m)) & 1

    def bits(self) -> list[int]:
        """All magnitude bits ordered from ``b=-m`` up to ``b=n-1``."""
        return [self.bit(int(b)) for b in self.fmt.positions]


def _round_magnitude(scaled: np.ndarray) -> np.ndarray:
    # scaled >= 0; floor and the fractional part are exact in binary floating point
    lower = np.floor(scaled)
    return lower + (scaled - lower >= 0.5)


def _quantize_parts(values, fmt: FixedPointFormat, overflow: Overflow):
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    negative = np.signbit(values)
    scaled = np.abs(values) * 2.0 ** fmt.m
    limit = fmt.max_magnitude
    if overflow == "saturate":
        # a tie at the top rounds away from zero, past the range
        saturated = scaled >= limit + 0.5
        mag = np.where(saturated, float(limit), _round_magnitude(scaled))
        wide = limit >= _INT64_SAFE
    elif overflow == "extend":
        saturated = np.zeros(values.shape, dtype=bool)
        mag = _round_magnitude(scaled)
        wide = bool(mag.size) and mag.max() >= _INT64_SAFE
    else:
        raise ValueError(f"unknown overflow policy {overflow!r}")
    if wide:
        # rounded floats are integers; Python ints keep them exact
        mag = np.array([int(v) for v in mag.ravel()], dtype=object).reshape(mag.shape)
    else:
        mag = mag.astype(np.int64)
    sign = np.where(negative, -1, 1).astype(np.int8)
    return sign, mag, saturated


def quantize(value: float, fmt: FixedPointFormat) -> FixedPointValue:
    """Round ``value`` to the nearest representable number, saturating at the range ends."""
    sign, mag, sat = _quantize_parts(value, fmt, "saturate")
    return FixedPointValue(int(sign), int(mag), fmt, bool(sat))


@dataclass(frozen=True, eq=False)
class FixedPointArray:
    """Array of fixed-point numbers in sign-magnitude form.

    ``magnitude`` holds integer step counts (``int64``, or ``object`` when the
    values are too wide for 64-bit arithmetic).
    """

    sign: np.ndarray
    magnitude: np.ndarray
    fmt: FixedPointFormat
    saturated: np.ndarray

    @classmethod
    def from_real(cls, values, fmt: FixedPointFormat,
                  overflow: Overflow = "saturate") -> FixedPointArray:
        sign, mag, sat = _quantize_parts(values, fmt, overflow)
        return cls(sign, mag, fmt, sat)

    @classmethod
    def from_signed(cls, ints, fmt: FixedPointFormat, saturated=None) -> FixedPointArray:
        """Build from signed step counts; zero gets a positive sign bit."""
        ints = np.asarray(ints)
        sign = np.where(ints < 0, -1, 1).astype(np.int8)
        mag = np.abs(ints)
        if saturated is None:
            saturated = np.zeros(ints.shape, dtype=bool)
        return cls(sign, mag, fmt, saturated)

    @classmethod
    def zeros(cls, shape, fmt: FixedPointFormat) -> FixedPointArray:
        return cls(np.ones(shape, dtype=np.int8), np.zeros(shape, dtype=np.int64),
                   fmt, np.zeros(shape, dtype=bool))

    @property
    def shape(self):
        return self.magnitude.shape

    def signed(self) -> np.ndarray:
        return self.sign.astype(self.magnitude.dtype) * self.magnitude

    def to_real(self) -> np.ndarray:
        mag = self.magnitude.astype(float)
        return np.where(self.sign < 0, -mag, mag) * 2.0 ** -self.fmt.m

    def __getitem__(self, idx) -> FixedPointValue:
        return FixedPointValue(int(self.sign[idx]), int(self.magnitude[idx]), self.fmt,
                               bool(self.saturated[idx]))


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    """A full-precision matrix rounded to a fixed-point format.

    ``delta`` is the exact offline residual ``quantized - original``.
    """

    values: FixedPointArray
    delta: np.ndarray

    @property
    def fmt(self) -> FixedPointFormat:
        return self.values.fmt

    @property
    def real(self) -> np.ndarray:
        return self.values.to_real()

    @property
    def saturated(self) -> np.ndarray:
        return self.values.saturated

    def signed(self) -> np.ndarray:
        return self.values.signed()

    def inexact_products(self) -> np.ndarray:
        """Per-row count of entries whose products with grid values need rounding.

        A coefficient that is an integer multiplies an on-grid operand exactly.
        """
        ints = self.signed()
        step = 1 << self.fmt.m
        return np.array([[v % step != 0 for v in row] for row in ints]).sum(axis=1)


def quantize_matrix(mat, fmt: FixedPointFormat) -> QuantizedMatrix:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    values = FixedPointArray.from_real(mat, fmt, "saturate")
    return QuantizedMatrix(values, values.to_real() - mat)


def _round_shift(prod, m: int):
    """Divide signed integers by ``2**m``, rounding to nearest, ties away from zero."""
    if m == 0:
        return prod
    half = 1 << (m - 1)
    mag = np.abs(prod)
    rounded = (mag + half) >> m
    return np.where(prod < 0, -rounded, rounded)


def fp_matvec(A: QuantizedMatrix, x: FixedPointArray,
              overflow: Overflow = "saturate") -> FixedPointArray:
    """Fixed-point product ``A @ x`` with one rounding per scalar product.

    ``x`` may carry leading batch dimensions: shape ``(..., q)`` gives
    ``(..., p)``.  Each nonzero ``A_ij * x_j`` is formed exactly, rounded to
    the shared format, and accumulated left to right over ``j``; with
    ``overflow="saturate"`` every partial sum is clipped to the range.
    """
    if A.fmt != x.fmt:
        raise ValueError(f"format mismatch: {A.fmt} vs {x.fmt}")
    a_int = A.signed()
    p, q = a_int.shape
    if x.shape[-1] != q:
        raise ValueError(f"shape mismatch: matrix {a_int.shape} with vector {x.shape}")
    fmt = A.fmt
    xs = x.signed()

    a_max = int(np.max(np.abs(a_int))) if a_int.size else 0
    x_max = int(np.max(np.abs(xs))) if xs.size else 0
    wide = a_max * x_max + (1 << fmt.m) * q >= _INT64_SAFE or xs.dtype == object
    if wide:
        xs = xs.astype(object)
        a_int = a_int.astype(object)
    limit = fmt.max_magnitude

    out_shape = xs.shape[:-1] + (p,)
    out = np.empty(out_shape, dtype=object if wide else np.int64)
    saturated = np.zeros(out_shape, dtype=bool)
    for i in range(p):
        acc = np.zeros(xs.shape[:-1], dtype=out.dtype)
        sat = np.zeros(xs.shape[:-1], dtype=bool)
        for j in range(q):
            coef = a_int[i, j]
            if coef == 0:
                continue
            acc = acc + _round_shift(coef * xs[..., j], fmt.m)
            if overflow == "saturate":
                over = np.abs(acc) > limit
                if np.any(over):
                    sat |= over
                    acc = np.clip(acc, -limit, limit)
        out[..., i] = acc
        saturated[..., i] = sat
    if wide and overflow == "saturate":
        out = out.astype(np.int64) if limit < _INT64_SAFE else out
    return FixedPointArray.from_signed(out, fmt, saturated)
