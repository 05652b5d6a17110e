"""Symmetric per-tensor INT8 quantization with INT32 accumulation.

All fixed-point tensors in the simulator are carried by the types here:
``QuantTensor`` (8-bit values plus a real-valued scale) and ``AccMatrix``
(32-bit accumulators produced by a GEMM pass before requantization).
Rounding is round-half-to-even throughout; saturation is symmetric at
[-127, +127] so that negation is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

INT8_MIN = -127
INT8_MAX = 127
INT32_MAX = 2**31 - 1

# Largest supported contraction length; 127*127*4096 < 2^31 so INT32
# accumulators cannot overflow for any plannable pass.
MAX_STREAM_LEN = 4096


def round_half_even(x: np.ndarray | float) -> np.ndarray:
    """Round to nearest integer, ties to even (numpy's native rounding)."""
    return np.round(x)


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor quantization parameters. zero_point is fixed at 0."""

    scale: float
    zero_point: int = 0

    def __post_init__(self) -> None:
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.zero_point != 0:
            raise ValueError("symmetric scheme requires zero_point == 0")


@dataclass(frozen=True)
class QuantTensor:
    """2-D grid of 8-bit values with a shared scale.

    ``signed=True`` tensors hold values in [-127, 127]. The softmax unit
    emits an unsigned-fraction tensor (``signed=False``, values in
    [0, 255], scale 1/256) which downstream GEMM passes consume like any
    other 8-bit operand.
    """

    values: np.ndarray
    params: QuantParams
    signed: bool = True

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.int64)
        if v.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {v.shape}")
        lo, hi = (INT8_MIN, INT8_MAX) if self.signed else (0, 255)
        if v.size and (v.min() < lo or v.max() > hi):
            raise ValueError(
                f"values out of {'signed' if self.signed else 'unsigned'} "
                f"8-bit range [{lo}, {hi}]"
            )
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def scale(self) -> float:
        return self.params.scale


@dataclass(frozen=True)
class AccMatrix:
    """32-bit signed accumulator grid; scale is the product of input scales."""

    values: np.ndarray
    scale: float

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.int64)
        if v.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {v.shape}")
        if v.size and np.abs(v).max() > INT32_MAX:
            raise OverflowError("accumulator exceeds 32-bit signed range")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def quantize(x: np.ndarray, params: QuantParams) -> QuantTensor:
    """Quantize a real matrix: clamp(round_half_even(x / scale), -127, 127)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"input must be 2-D, got shape {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"non-finite input at ({i}, {j}): {x[i, j]}")
    q = np.clip(round_half_even(x / params.scale), INT8_MIN, INT8_MAX)
    return QuantTensor(q.astype(np.int64), params)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.values.astype(np.float64) * q.scale


def requantize(acc: AccMatrix, out_params: QuantParams) -> QuantTensor:
    """Rescale INT32 accumulators back to the 8-bit activation domain."""
    ratio = acc.scale / out_params.scale
    q = np.clip(round_half_even(acc.values.astype(np.float64) * ratio), INT8_MIN, INT8_MAX)
    return QuantTensor(q.astype(np.int64), out_params)


def minmax_scale(x: np.ndarray, qmax: int = INT8_MAX) -> float:
    """Min-max calibration: scale so max |x| maps to the top code.

    All-zero (or empty) tensors fall back to the 1/127 floor so the scale
    stays positive while zero still maps to zero exactly.
    """
    amax = float(np.abs(x).max()) if np.asarray(x).size else 0.0
    if amax == 0.0 or not np.isfinite(amax):
        return 1.0 / qmax
    return amax / qmax
