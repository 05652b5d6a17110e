"""Cycle-level model of the s x 64 processing-element array.

One pass streams the contraction dimension through preloaded weights and
emits the product column by column. Per-pass cycles:

    ceil(k * out_cols / weight_load_bw)   weight preload
  + max(k, out_cols)                      streaming / column drain
  + fill_latency + drain_latency

The drain term only exceeds k for small toy passes whose output has more
columns than streaming cycles (the array emits at most one column per
cycle). Bias and residual operands arrive already rescaled into the
accumulator domain; ReLU clamps before requantization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quant import AccMatrix, QuantParams, QuantTensor, requantize


@dataclass(frozen=True)
class SaTiming:
    weight_load_bw: int = 256          # weight values per cycle during preload
    fill_latency: int = 0              # array fill skew (folded into streaming)
    drain_latency: int = 0             # extra cycles after the last column
    layernorm_tail: int = 16           # finalize->rsqrt->scale pipeline depth
    softmax_pipeline_depth: int = 12

    def __post_init__(self) -> None:
        if self.weight_load_bw < 1:
            raise ValueError("weight_load_bw must be >= 1")
        for name in ("fill_latency", "drain_latency", "layernorm_tail",
                     "softmax_pipeline_depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class PassResult:
    acc: AccMatrix
    out: QuantTensor | None
    cycles: int
    column_timestamps: tuple[int, ...]  # pass-relative completion cycles


def pass_cycles(stream_len: int, out_cols: int, timing: SaTiming) -> int:
    preload = math.ceil(stream_len * out_cols / timing.weight_load_bw)
    return (preload + timing.fill_latency + max(stream_len, out_cols)
            + timing.drain_latency)


def int32_gemm(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact integer product with the 32-bit accumulator range enforced."""
    acc = a.astype(np.int64) @ w.astype(np.int64)
    if acc.size and np.abs(acc).max() > 2**31 - 1:
        raise OverflowError("INT32 accumulator overflow")
    return acc


def run_pass(
    a: QuantTensor,
    weight: QuantTensor,
    timing: SaTiming,
    *,
    bias_acc: np.ndarray | None = None,
    residual_acc: np.ndarray | None = None,
    relu: bool = False,
    out_params: QuantParams | None = None,
) -> PassResult:
    """Execute one GEMM pass: A(s x k) times weight(k x out_cols).

    ``out_params=None`` leaves the result in the accumulator domain (used
    for passes that feed the softmax unit or the layer-norm unit).
    """
    k, out_cols = weight.rows, weight.cols
    if a.cols != k:
        raise ValueError(f"stream length mismatch: A has {a.cols} cols, weight has {k} rows")
    acc_vals = int32_gemm(a.values, weight.values)
    if bias_acc is not None:
        if bias_acc.shape != (out_cols,):
            raise ValueError(f"bias must have shape ({out_cols},), got {bias_acc.shape}")
        acc_vals = acc_vals + bias_acc.astype(np.int64)
    if residual_acc is not None:
        if residual_acc.shape != acc_vals.shape:
            raise ValueError(
                f"residual shape {residual_acc.shape} != output shape {acc_vals.shape}")
        acc_vals = acc_vals + residual_acc.astype(np.int64)
    if relu:
        acc_vals = np.maximum(acc_vals, 0)

    acc = AccMatrix(acc_vals, a.scale * weight.scale)
    out = requantize(acc, out_params) if out_params is not None else None

    cycles = pass_cycles(k, out_cols, timing)
    preload = math.ceil(k * out_cols / timing.weight_load_bw)
    last = preload + timing.fill_latency + max(k, out_cols)
    stamps = tuple(last - (out_cols - 1 - j) for j in range(out_cols))
    assert cycles == stamps[-1] + timing.drain_latency
    return PassResult(acc=acc, out=out, cycles=cycles, column_timestamps=stamps)
