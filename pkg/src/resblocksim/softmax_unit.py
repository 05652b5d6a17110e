"""Multiplier-free scaled masked-softmax pipeline.

Four phases per row of the s x s logit matrix:

  1. scale the INT32 logits by >>3 (the 1/sqrt(64) factor) and find the
     row maximum over unmasked positions;
  2. accumulate sum of exp(logit - max) with a shift-add exponential;
  3. take ln of the sum with a leading-one detector and a shift-add
     logarithm (the log-sum-exp trick removes the divider);
  4. emit exp(logit - max - ln_sum), quantized to an unsigned 8-bit
     fraction (scale 1/256); masked positions are forced to exact zero.

The exponential maps x to 2^(x*log2e): the log2e multiply is the shift-add
chain x + x>>1 - x>>4 + x>>7 - x>>9, the integer part of the product
selects a right shift, and the fractional part drives a four-segment
piecewise-linear mantissa whose slopes are themselves sums of shifts.
The logarithm mirrors it: mantissa to log2 by a four-segment
piecewise-linear map, then (w + log2mant) * ln2 with ln2 as the shift-add
1/2 + 1/8 + 1/16 = 0.6875 (so ln of exact powers of two is w * 0.6875).
All intermediate values are dyadic rationals, so the float arithmetic
below is bit-exact for the shifter network it models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import QuantParams, QuantTensor, round_half_even
from .reference import validate_mask

# Fixed formats (fraction bits). Logit differences and ln-domain values
# are signed Q10.8; the exp-sum accumulates on an unsigned 1/4096 grid.
LOGIT_FRAC_BITS = 8
SUM_FRAC_BITS = 12
OUT_FRAC_BITS = 8
OUTPUT_SCALE = 1.0 / (1 << OUT_FRAC_BITS)

FLUSH_THRESHOLD = -16  # exp inputs strictly below this are flushed to zero

# log2(e) ~ 1 + 1/2 - 1/16 + 1/128 - 1/512; shift amounts with signs.
LOG2E_SHIFTS = ((0, +1), (1, +1), (4, -1), (7, +1), (9, -1))
# ln(2) ~ 1/2 + 1/8 + 1/16 = 0.6875
LN2_SHIFTS = ((1, +1), (3, +1), (4, +1))

# Piecewise-linear 2^f over [0,1), four segments of width 1/4.
# Bases in Q2.16; slope shift-add decompositions (applied to Q0.16 deltas).
EXP_SEG_BASES = np.array([65536, 77824, 92672, 110080], dtype=np.int64)
EXP_SEG_SLOPES = (
    ((1, +1), (2, +1)),            # 0.75
    ((0, +1), (4, -1), (5, -1)),   # 0.90625
    ((0, +1), (4, +1)),            # 1.0625
    ((0, +1), (2, +1), (5, +1)),   # 1.28125
)

# Piecewise-linear log2(1+f) over [0,1): bases in Q0.16, shift-add slopes.
LN_SEG_BASES = np.array([0, 20992, 38144, 52736], dtype=np.int64)
LN_SEG_SLOPES = (
    ((0, +1), (2, +1), (5, +1)),   # 1.28125
    ((0, +1), (5, +1), (6, +1)),   # 1.046875
    ((0, +1), (3, -1), (6, +1)),   # 0.890625
    ((1, +1), (2, +1), (6, +1)),   # 0.765625
)


def shift_add(x: np.ndarray, shifts: tuple[tuple[int, int], ...]) -> np.ndarray:
    """Sum of arithmetically shifted copies of x (the only multiplier here)."""
    total = np.zeros_like(x)
    for amount, sign in shifts:
        total = total + sign * (x >> amount)
    return total


def shift_add_value(shifts: tuple[tuple[int, int], ...]) -> float:
    return sum(sign * 2.0**-amount for amount, sign in shifts)


@dataclass(frozen=True)
class FixedFormat:
    name: str
    integer_bits: int
    fraction_bits: int
    signed: bool

    def __post_init__(self) -> None:
        total = self.integer_bits + self.fraction_bits + (1 if self.signed else 0)
        if total > 32:
            raise ValueError(f"format {self.name} exceeds 32 bits")


LOGIT_FORMAT = FixedFormat("logit", 10, LOGIT_FRAC_BITS, signed=True)
SUM_FORMAT = FixedFormat("exp_sum", 8, SUM_FRAC_BITS, signed=False)
OUT_FORMAT = FixedFormat("out", 0, OUT_FRAC_BITS, signed=False)


def scale_input(d: np.ndarray | int) -> np.ndarray | int:
    """Divide raw logits by 8 as an arithmetic right shift (floors)."""
    return np.asarray(d, dtype=np.int64) >> 3 if isinstance(d, np.ndarray) else int(d) >> 3


def row_max(row: np.ndarray, mask_row: np.ndarray) -> int:
    legal = np.asarray(mask_row) == 0
    if not legal.any():
        raise ValueError("fully masked row has no maximum")
    return int(np.asarray(row)[legal].max())


def exp_approx(x_q: np.ndarray) -> np.ndarray:
    """Shift-add exp of Q10.8 values <= 0; returns exact dyadic reals.

    Inputs strictly below the flush threshold return 0 (their true value
    is under the output LSB); the threshold itself is still computed.
    """
    x_q = np.asarray(x_q, dtype=np.int64)
    if x_q.size and x_q.max() > 0:
        raise ValueError("exp_approx domain is x <= 0")
    flush = x_q < FLUSH_THRESHOLD << LOGIT_FRAC_BITS
    t = shift_add(x_q, LOG2E_SHIFTS)
    w = t >> LOGIT_FRAC_BITS
    f = t - (w << LOGIT_FRAC_BITS)
    seg = f >> 6
    delta16 = (f & 0x3F) << 8
    slope = np.choose(seg, [shift_add(delta16, s) for s in EXP_SEG_SLOPES])
    mant = (EXP_SEG_BASES[seg] + slope).astype(np.float64)  # Q2.16
    out = mant * np.exp2((w - 16).astype(np.float64))
    return np.where(flush, 0.0, out)


def ln_approx(a_int: np.ndarray, frac_bits: int = SUM_FRAC_BITS) -> np.ndarray:
    """Shift-add ln of positive fixed-point values; returns Q10.8 integers."""
    a_int = np.asarray(a_int, dtype=np.int64)
    if a_int.size and a_int.min() <= 0:
        raise ValueError("ln_approx domain is a > 0")
    nbit = (np.int64(np.floor(np.log2(a_int)))).astype(np.int64)
    w = nbit - frac_bits
    rem = a_int - (np.int64(1) << nbit)
    f16 = np.where(nbit >= 16, rem >> np.maximum(nbit - 16, 0),
                   rem << np.maximum(16 - nbit, 0))
    seg = f16 >> 14
    delta = f16 & 0x3FFF
    slope = np.choose(seg, [shift_add(delta, s) for s in LN_SEG_SLOPES])
    u16 = (w << 16) + LN_SEG_BASES[seg] + slope  # (w + log2 mantissa) in Q*.16
    r16 = shift_add(u16, LN2_SHIFTS)
    return round_half_even(r16 / 256.0).astype(np.int64)  # Q10.8


def softmax_latency(s: int, pipeline_depth: int = 12) -> int:
    """Four pipelined phases, one s-element column per cycle per phase."""
    return 4 * s + pipeline_depth


def scaled_masked_softmax(
    d: np.ndarray, mask: np.ndarray, logit_scale: float
) -> QuantTensor:
    """Fixed-point softmax of an INT32 logit matrix (real value per LSB =
    ``logit_scale``). Returns an unsigned Q0.8 tensor, scale 1/256."""
    d = np.asarray(d, dtype=np.int64)
    s = d.shape[0]
    m = validate_mask(mask, s)
    legal = m == 0

    chi = scale_input(d)  # still on the logit_scale grid
    # Phases 1-2 run on the exact integer grid; the subtraction result is
    # converted once to Q10.8 real units at the unit boundary.
    maxes = np.where(legal, chi, np.iinfo(np.int64).min).max(axis=1, keepdims=True)
    diff_q = round_half_even(
        (chi - maxes) * (logit_scale * (1 << LOGIT_FRAC_BITS))
    ).astype(np.int64)
    diff_q = np.minimum(diff_q, 0)

    e = np.where(legal, exp_approx(diff_q), 0.0)
    sums = round_half_even(e.sum(axis=1) * (1 << SUM_FRAC_BITS)).astype(np.int64)
    sums = np.maximum(sums, 1)
    ln_sum = ln_approx(sums)  # Q10.8

    y = exp_approx(diff_q - ln_sum[:, None])
    q = np.clip(round_half_even(y * (1 << OUT_FRAC_BITS)), 0, 255).astype(np.int64)
    q[~legal] = 0
    return QuantTensor(q, QuantParams(OUTPUT_SCALE), signed=False)
