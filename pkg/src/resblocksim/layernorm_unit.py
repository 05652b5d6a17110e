"""Streaming layer normalization with latency hiding.

Running sums of x and x^2 are updated as each accumulator-domain column
arrives from the array, so mean and variance are ready a fixed number of
cycles after the last column regardless of row width (a two-pass
implementation would add at least 2*d_model cycles). Variance comes from
the one-pass identity var = E[x^2] - E[x]^2, evaluated as the exact
integer (d*sum_sq - sum^2) / d^2 so it can never go negative, then
rounded once onto a grid with 8 fraction bits. The inverse square root
is a 256-entry mantissa table plus an exponent shift; odd exponents fold
in 1/sqrt(2) as a shift-add correction.
"""

from __future__ import annotations

import numpy as np

from .quant import INT8_MAX, INT8_MIN, QuantParams, QuantTensor, round_half_even

VAR_FRAC_BITS = 8

# Runtime budget on accumulator-domain inputs: d_model * (2^21)^2 keeps the
# 64-bit sum-of-squares accumulators exact.
ABS_INPUT_BOUND = 1 << 21

TWO_PASS_BASELINE_FACTOR = 2  # extra cycles per row width for the naive path

# 1/sqrt(2) ~ 1/2 + 1/8 + 1/16 + 1/64 + 1/256 = 0.70703125
INV_SQRT2_SHIFTS = ((1, +1), (3, +1), (4, +1), (6, +1), (8, +1))

# Q1.15 entries for m^(-1/2), m = 1 + i/256 at the bucket's lower edge so
# exact powers of two come out exact.
INV_SQRT_LUT = np.array(
    [round(32768.0 / np.sqrt(1.0 + i / 256.0)) for i in range(256)], dtype=np.int64
)


def two_pass_extra_cycles(d_model: int) -> int:
    """Post-final-column latency of the straightforward two-pass baseline."""
    return TWO_PASS_BASELINE_FACTOR * d_model


def _fold_inv_sqrt2(entry: np.ndarray) -> np.ndarray:
    total = np.zeros_like(entry)
    for amount, sign in INV_SQRT2_SHIFTS:
        total = total + sign * (entry >> amount)
    return total


def inv_sqrt(v_int: np.ndarray, frac_bits: int = VAR_FRAC_BITS) -> np.ndarray:
    """(v + eps)^(-1/2) for nonnegative fixed-point v (value = v_int/2^frac).

    eps enters as a one-LSB floor on the input, which preserves the
    divide-by-zero guarantee on a grid too coarse to represent 1e-8.
    """
    v = np.maximum(np.asarray(v_int, dtype=np.int64), 1)
    nbit = np.int64(np.floor(np.log2(v)))
    p = nbit - frac_bits
    idx = np.where(
        nbit >= 8, (v >> np.maximum(nbit - 8, 0)) - 256,
        (v << np.maximum(8 - nbit, 0)) - 256,
    )
    entry = INV_SQRT_LUT[idx]
    odd = (p & 1) != 0
    folded = np.where(odd, _fold_inv_sqrt2(entry), entry)
    half_exp = np.where(odd, (p - 1) // 2, p // 2)
    return folded.astype(np.float64) * np.exp2(-15.0 - half_exp.astype(np.float64))


def _rhe_div(num: np.ndarray, den: int) -> np.ndarray:
    """Exact integer round-half-even division."""
    num = np.asarray(num, dtype=np.int64)
    q, r = np.divmod(num, den)  # floor division; 0 <= r < den
    twice = 2 * r
    round_up = (twice > den) | ((twice == den) & (q % 2 != 0))
    return q + round_up


class StreamingLayerNorm:
    """Per-row statistics lanes fed column by column."""

    def __init__(self, rows: int, d_model: int):
        self.rows = rows
        self.d_model = d_model
        self.count = 0
        self.sum = np.zeros(rows, dtype=np.int64)
        self.sum_sq = np.zeros(rows, dtype=np.int64)
        self._columns: list[np.ndarray] = []

    def absorb_column(self, col: np.ndarray, col_index: int) -> None:
        col = np.asarray(col, dtype=np.int64)
        if col.shape != (self.rows,):
            raise ValueError(f"column must have shape ({self.rows},), got {col.shape}")
        if col_index != self.count:
            raise ValueError(
                f"out-of-order column: expected index {self.count}, got {col_index}")
        if self.count >= self.d_model:
            raise ValueError("all columns already absorbed")
        if col.size and np.abs(col).max() > ABS_INPUT_BOUND:
            raise OverflowError("input exceeds the accumulator magnitude budget")
        self.sum += col
        self.sum_sq += col * col
        self._columns.append(col)
        self.count += 1

    def finalize_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (mean, var): mean on the input integer grid, variance on
        a grid with VAR_FRAC_BITS fraction bits. Both rounded half-even."""
        if self.count != self.d_model:
            raise ValueError(f"absorbed {self.count} of {self.d_model} columns")
        d = self.d_model
        mean = _rhe_div(self.sum, d)
        numerator = d * self.sum_sq - self.sum * self.sum  # exact, >= 0
        assert (numerator >= 0).all()
        den = (d * d) >> VAR_FRAC_BITS  # d is a multiple of 16, so exact
        var_q = _rhe_div(numerator, den)
        return mean, var_q

    def matrix(self) -> np.ndarray:
        return np.stack(self._columns, axis=1)

    def normalize_output(
        self,
        gamma: np.ndarray,
        beta: np.ndarray,
        out_params: QuantParams,
    ) -> QuantTensor:
        mean, var_q = self.finalize_stats()
        inv_std = inv_sqrt(var_q)
        g = self.matrix()
        normed = (g - mean[:, None]).astype(np.float64) * inv_std[:, None]
        out = normed * gamma + beta
        q = np.clip(round_half_even(out / out_params.scale), INT8_MIN, INT8_MAX)
        return QuantTensor(q.astype(np.int64), out_params)
