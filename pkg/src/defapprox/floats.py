"""Binary32 / BFloat16 codecs and the approximate floating-point multipliers.

The approximate multipliers keep the sign and exponent paths exact and
replace the significand multiplier with an AMA5 array multiplier. The
normalized product is truncated (no rounding), subnormals are flushed to
zero on input and output, and NaN/Inf follow exact special-case rules.

Scalar functions take and return Python floats holding binary32 values.
The ``*_bits`` functions are vectorized over numpy arrays of bit patterns
and are what the CNN engine uses.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .gates import AdderKind, RoutedMultiplier, Wiring, array_multiply

F32_BIAS = 127
F32_QNAN = 0x7FC00000
BF16_QNAN = 0x7FC0

#: Array wiring used by both approximate float multipliers.
MANTISSA_WIRING = Wiring.CARRY_SAVE


class FloatClass(enum.Enum):
    ZERO = "zero"
    SUBNORMAL = "subnormal"
    NORMAL = "normal"
    INFINITY = "infinity"
    NAN = "nan"


def _classify(exponent, fraction, exp_max):
    if exponent == 0:
        return FloatClass.ZERO if fraction == 0 else FloatClass.SUBNORMAL
    if exponent == exp_max:
        return FloatClass.INFINITY if fraction == 0 else FloatClass.NAN
    return FloatClass.NORMAL


@dataclass(frozen=True)
class F32Parts:
    sign: int
    exponent: int
    fraction: int

    def __post_init__(self):
        if self.sign not in (0, 1) or not 0 <= self.exponent < 256 or not 0 <= self.fraction < (1 << 23):
            raise ValueError(f"field out of range: {self}")

    @property
    def float_class(self):
        return _classify(self.exponent, self.fraction, 0xFF)

    @property
    def significand(self):
        """24-bit significand with the hidden bit (normal values only)."""
        return (1 << 23) | self.fraction


@dataclass(frozen=True)
class BF16Value:
    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < (1 << 16):
            raise ValueError(f"BF16 pattern out of range: {self.bits:#x}")

    @property
    def sign(self):
        return self.bits >> 15

    @property
    def exponent(self):
        return (self.bits >> 7) & 0xFF

    @property
    def fraction(self):
        return self.bits & 0x7F

    @property
    def float_class(self):
        return _classify(self.exponent, self.fraction, 0xFF)

    def __float__(self):
        return bf16_to_f32(self)


def f32_to_bits(x):
    return struct.unpack("<I", struct.pack("<f", x))[0]


def bits_to_f32(bits):
    return struct.unpack("<f", struct.pack("<I", bits))[0]


def decompose_bits(bits):
    return F32Parts(bits >> 31, (bits >> 23) & 0xFF, bits & 0x7FFFFF)


def compose_bits(parts):
    return (parts.sign << 31) | (parts.exponent << 23) | parts.fraction


def decompose_f32(x):
    return decompose_bits(f32_to_bits(x))


def compose_f32(parts):
    return bits_to_f32(compose_bits(parts))


def classify_f32(x):
    return decompose_f32(x).float_class


def f32_bits_to_bf16_bits(bits):
    """Truncate binary32 patterns to BF16 patterns; NaNs stay NaN.

    Works on ints and on uint32/uint64 numpy arrays.
    """
    if isinstance(bits, np.ndarray):
        bits = bits.astype(np.uint32, copy=False)
        out = (bits >> np.uint32(16)).astype(np.uint16)
        lost_nan = ((bits & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)) & ((out & np.uint16(0x7F)) == 0)
        return np.where(lost_nan, out | np.uint16(0x40), out)
    out = bits >> 16
    if (bits & 0x7FFFFFFF) > 0x7F800000 and not out & 0x7F:
        out |= 0x40
    return out


def bf16_bits_to_f32_bits(bits):
    if isinstance(bits, np.ndarray):
        return bits.astype(np.uint32) << np.uint32(16)
    return bits << 16


def f32_to_bf16(x):
    return BF16Value(f32_bits_to_bf16_bits(f32_to_bits(x)))


def bf16_to_f32(value):
    return bits_to_f32(bf16_bits_to_f32_bits(value.bits))


def truncate_to_bf16(x):
    """Zero the low 16 bits of a float32 array (narrow then widen)."""
    x = np.asarray(x, dtype=np.float32)
    bits = f32_bits_to_bf16_bits(x.view(np.uint32))
    return bf16_bits_to_f32_bits(bits).view(np.float32)


@dataclass(frozen=True)
class _Format:
    frac_bits: int
    total_bits: int
    qnan: int

    @property
    def sig_bits(self):
        return self.frac_bits + 1


F32 = _Format(23, 32, F32_QNAN)
BF16 = _Format(7, 16, BF16_QNAN)


def approx_mul_bits(a_bits, b_bits, fmt, mantissa_mul):
    """Approximate float multiply on bit-pattern arrays.

    ``mantissa_mul(ma, mb)`` maps uint64 significand arrays (hidden bit
    included) to their 2*sig_bits-wide product.
    """
    a = np.asarray(a_bits).astype(np.uint64)
    b = np.asarray(b_bits).astype(np.uint64)
    a, b = np.broadcast_arrays(a, b)
    fb = fmt.frac_bits
    frac_mask = np.uint64((1 << fb) - 1)
    sign_shift = np.uint64(fmt.total_bits - 1)
    fbu = np.uint64(fb)
    ff = np.uint64(0xFF)

    sa, sb = a >> sign_shift, b >> sign_shift
    ea, eb = ((a >> fbu) & ff).astype(np.int64), ((b >> fbu) & ff).astype(np.int64)
    fa, fb_ = a & frac_mask, b & frac_mask
    sign = (sa ^ sb) << sign_shift

    a_nan = (ea == 0xFF) & (fa != 0)
    b_nan = (eb == 0xFF) & (fb_ != 0)
    a_inf = (ea == 0xFF) & (fa == 0)
    b_inf = (eb == 0xFF) & (fb_ == 0)
    a_zero = ea == 0
    b_zero = eb == 0
    nan = a_nan | b_nan | (a_inf & b_zero) | (b_inf & a_zero)
    inf = (a_inf | b_inf) & ~nan
    zero = (a_zero | b_zero) & ~nan & ~inf
    normal = ~(nan | inf | zero)

    hidden = np.uint64(1 << fb)
    ma = np.where(normal, fa | hidden, hidden)
    mb = np.where(normal, fb_ | hidden, hidden)
    prod = np.asarray(mantissa_mul(ma, mb), dtype=np.uint64)
    exp = ea + eb - F32_BIAS

    top = np.uint64(2 * fb + 1)
    lead = np.uint64(2 * fb)
    one = np.uint64(1)
    high = ((prod >> top) & one).astype(bool)
    prod = np.where(high, prod >> one, prod)
    exp = exp + high
    prod_zero = prod == 0
    # AMA5 corruption can clear the leading bit; renormalize left
    need = ~prod_zero & (((prod >> lead) & one) == 0)
    if np.any(need):
        shifts = np.zeros(prod.shape, dtype=np.int64)
        p = prod.copy()
        for _ in range(2 * fb):
            step = ~prod_zero & (((p >> lead) & one) == 0)
            if not np.any(step):
                break
            p = np.where(step, p << one, p)
            shifts += step
        prod = p
        exp = exp - shifts
    frac = (prod >> fbu) & frac_mask

    overflow = exp >= 0xFF
    underflow = (exp <= 0) | prod_zero
    result = sign | (np.clip(exp, 0, 0xFF).astype(np.uint64) << fbu) | frac
    result = np.where(underflow, sign, result)
    result = np.where(overflow & ~underflow, sign | (ff << fbu), result)
    result = np.where(zero, sign, result)
    result = np.where(inf, sign | (ff << fbu), result)
    result = np.where(nan, np.uint64(fmt.qnan), result)
    return result


@lru_cache(maxsize=None)
def _routed(width):
    return RoutedMultiplier(width, width, MANTISSA_WIRING)


def _gate_level(width):
    def mul(ma, mb):
        return array_multiply(AdderKind.AMA5, ma, mb, width, width, MANTISSA_WIRING)

    return mul


def ax_fpm_mul_bits(a_bits, b_bits):
    """Vectorized Ax-FPM on uint32 patterns, via the compiled AMA5 routing."""
    out = approx_mul_bits(a_bits, b_bits, F32, _routed(24))
    return out.astype(np.uint32)


def approx_bf16_mul_bits(a_bits, b_bits):
    out = approx_mul_bits(a_bits, b_bits, BF16, _routed(8))
    return out.astype(np.uint16)


def ax_fpm_mul(a, b):
    """Approximate binary32 product; significands go through the AMA5 gate netlist."""
    out = approx_mul_bits(np.uint64(f32_to_bits(a)), np.uint64(f32_to_bits(b)), F32, _gate_level(24))
    return bits_to_f32(int(out))


def exact_fpm_mul(a, b):
    return float(np.float32(a) * np.float32(b))


def approx_bf16_mul(a, b):
    out = approx_mul_bits(np.uint64(a.bits), np.uint64(b.bits), BF16, _gate_level(8))
    return BF16Value(int(out))


def ax_fpm_multiply(a, b):
    """Elementwise Ax-FPM on float32 arrays."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    return ax_fpm_mul_bits(a.view(np.uint32), b.view(np.uint32)).view(np.float32)


def approx_bf16_multiply(a, b):
    """Elementwise approximate BF16 product of float32 arrays (operands truncated)."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    ab = f32_bits_to_bf16_bits(a.view(np.uint32))
    bb = f32_bits_to_bf16_bits(b.view(np.uint32))
    return bf16_bits_to_f32_bits(approx_bf16_mul_bits(ab, bb)).view(np.float32)
