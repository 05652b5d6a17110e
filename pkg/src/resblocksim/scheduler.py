"""End-to-end execution of a ResBlock over the array, softmax and
layer-norm units, with cycle accounting.

Passes run back to back on the array. The softmax unit runs on its own
timeline, starting when a head's logit passes finish and overlapping the
value projection; if it would finish after the attention-weight GEMM
needs its output, the run completes functionally but the report carries a
scheduling fault (the timeline is never silently stretched). Layer
normalization absorbs output-projection columns as they stream out, so
only its fixed pipeline tail follows the final pass.

Functional results are independent of all timing parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import D_K, ModelConfig
from .layernorm_unit import StreamingLayerNorm
from .planner import GemmPass, PassKind, PartitionPlan, plan_ffn, plan_mha
from .quant import (
    QuantParams,
    QuantTensor,
    dequantize,
    minmax_scale,
    quantize,
    round_half_even,
)
from .reference import (
    HeadWeights,
    ResBlockWeights,
    ffn_intermediates,
    mha_intermediates,
    validate_mask,
)
from .softmax_unit import scaled_masked_softmax, softmax_latency
from .systolic import SaTiming, run_pass


@dataclass(frozen=True)
class QuantizedHead:
    wq: QuantTensor
    wk: QuantTensor
    wv: QuantTensor
    bq: QuantTensor
    bk: QuantTensor
    bv: QuantTensor


@dataclass(frozen=True)
class QuantizedResBlockWeights:
    heads: tuple[QuantizedHead, ...]
    wg: QuantTensor
    bg: QuantTensor
    w1: QuantTensor
    b1: QuantTensor
    w2: QuantTensor
    b2: QuantTensor
    gamma: QuantTensor
    beta: QuantTensor


def _qvec(v: np.ndarray) -> QuantTensor:
    arr = np.asarray(v, dtype=np.float64).reshape(1, -1)
    return quantize(arr, QuantParams(minmax_scale(arr)))


def _qmat(m: np.ndarray) -> QuantTensor:
    m = np.asarray(m, dtype=np.float64)
    return quantize(m, QuantParams(minmax_scale(m)))


def quantize_resblock_weights(w: ResBlockWeights) -> QuantizedResBlockWeights:
    heads = tuple(
        QuantizedHead(
            wq=_qmat(hw.w_q), wk=_qmat(hw.w_k), wv=_qmat(hw.w_v),
            bq=_qvec(hw.b_q), bk=_qvec(hw.b_k), bv=_qvec(hw.b_v),
        )
        for hw in w.heads
    )
    return QuantizedResBlockWeights(
        heads=heads,
        wg=_qmat(w.w_g), bg=_qvec(w.b_g),
        w1=_qmat(w.w_1), b1=_qvec(w.b_1),
        w2=_qmat(w.w_2), b2=_qvec(w.b_2),
        gamma=_qvec(w.gamma), beta=_qvec(w.beta),
    )


def dequantize_resblock_weights(qw: QuantizedResBlockWeights) -> ResBlockWeights:
    heads = [
        HeadWeights(
            w_q=dequantize(h.wq), w_k=dequantize(h.wk), w_v=dequantize(h.wv),
            b_q=dequantize(h.bq)[0], b_k=dequantize(h.bk)[0], b_v=dequantize(h.bv)[0],
        )
        for h in qw.heads
    ]
    return ResBlockWeights(
        heads=heads,
        w_g=dequantize(qw.wg), b_g=dequantize(qw.bg)[0],
        w_1=dequantize(qw.w1), b_1=dequantize(qw.b1)[0],
        w_2=dequantize(qw.w2), b_2=dequantize(qw.b2)[0],
        gamma=dequantize(qw.gamma)[0], beta=dequantize(qw.beta)[0],
    )


@dataclass(frozen=True)
class PassTrace:
    id: str
    kind: str
    stream_len: int
    cycles: int
    start: int
    end: int


@dataclass(frozen=True)
class SoftmaxWindow:
    head: int
    softmax_done: int
    vproj_done: int


@dataclass(frozen=True)
class CycleReport:
    per_pass: tuple[PassTrace, ...]
    softmax_windows: tuple[SoftmaxWindow, ...]
    layernorm: tuple[int, int]  # (first output cycle, last output cycle)
    total_cycles: int
    scheduling_faults: tuple[int, ...]  # heads whose softmax missed its window
    oracle_err_max_lsb: float
    oracle_err_mean_lsb: float

    @property
    def sa_cycles(self) -> int:
        return self.per_pass[-1].end if self.per_pass else 0


def check_overlap(report: CycleReport) -> list[int]:
    """Heads whose softmax finished after the value projection did."""
    return [w.head for w in report.softmax_windows if w.softmax_done > w.vproj_done]


def derive_latency(total_cycles: int, clock_hz: float) -> float:
    if clock_hz <= 0:
        raise ValueError("clock_hz must be positive")
    return total_cycles / clock_hz


def speedup(ref_latency: float, this_latency: float) -> float:
    return ref_latency / this_latency


def _to_acc_grid(real_values: np.ndarray, acc_scale: float) -> np.ndarray:
    return round_half_even(np.asarray(real_values, dtype=np.float64) / acc_scale).astype(np.int64)


def _col_block(t: QuantTensor, i: int) -> QuantTensor:
    return QuantTensor(t.values[:, i * D_K:(i + 1) * D_K], t.params, t.signed)


def _vec_block(t: QuantTensor, i: int) -> np.ndarray:
    return dequantize(t)[0, i * D_K:(i + 1) * D_K]


@dataclass
class _Timeline:
    timing: SaTiming
    now: int = 0
    traces: list[PassTrace] = field(default_factory=list)

    def record(self, p: GemmPass, cycles: int, stamps: tuple[int, ...]):
        start = self.now
        end = start + cycles
        self.traces.append(PassTrace(p.id, p.kind.value, p.stream_len, cycles, start, end))
        self.now = end
        return start, end, tuple(start + t for t in stamps)


def run_mha(
    cfg: ModelConfig,
    qw: QuantizedResBlockWeights,
    q_t: QuantTensor,
    k_t: QuantTensor,
    v_t: QuantTensor,
    mask: np.ndarray,
    timing: SaTiming = SaTiming(),
) -> tuple[QuantTensor, CycleReport]:
    s, d = cfg.s, cfg.d_model
    for name, t in (("Q", q_t), ("K", k_t), ("V", v_t)):
        if (t.rows, t.cols) != (s, d):
            raise ValueError(f"{name} must be {s}x{d}, got {t.rows}x{t.cols}")
    mask = validate_mask(mask, s)
    if len(qw.heads) != cfg.h or qw.wg.rows != d:
        raise ValueError("weights do not match the model config")

    wf = dequantize_resblock_weights(qw)
    inter = mha_intermediates(dequantize(q_t), dequantize(k_t), dequantize(v_t), wf, mask)
    t1_params = QuantParams(minmax_scale(np.array([inter.temp1_absmax])))
    t2_params = QuantParams(minmax_scale(np.array([inter.temp2_absmax])))
    p_params = QuantParams(minmax_scale(np.array([inter.p_absmax])))
    out_params = QuantParams(minmax_scale(inter.output))

    plan = plan_mha(cfg)
    tl = _Timeline(timing)
    ln_unit = StreamingLayerNorm(s, d)
    ln_col = 0

    temp1: dict[int, QuantTensor] = {}
    temp2: dict[int, QuantTensor] = {}
    logits: dict[int, np.ndarray] = {i: np.zeros((s, s), dtype=np.int64) for i in range(cfg.h)}
    softmax_out: dict[int, QuantTensor] = {}
    softmax_done: dict[int, int] = {}
    p_vals = np.zeros((s, d), dtype=np.int64)
    windows: list[SoftmaxWindow] = []
    faults: list[int] = []

    for p in plan.passes:
        i = p.head
        if p.kind is PassKind.QPROJ:
            hq = qw.heads[i]
            res = run_pass(q_t, hq.wq, timing,
                           bias_acc=_to_acc_grid(dequantize(hq.bq)[0], q_t.scale * hq.wq.scale),
                           out_params=t1_params)
            temp1[i] = res.out
        elif p.kind is PassKind.KPROJ:
            hq = qw.heads[i]
            res = run_pass(k_t, hq.wk, timing,
                           bias_acc=_to_acc_grid(dequantize(hq.bk)[0], k_t.scale * hq.wk.scale),
                           out_params=t2_params)
            temp2[i] = res.out
        elif p.kind is PassKind.QKT:
            a = temp1[i]
            kt = temp2[i]
            a_rows = a.values[p.row_offset:p.row_offset + D_K]
            w_cols = kt.values[p.col_offset:p.col_offset + p.out_cols].T
            res = run_pass(
                QuantTensor(a_rows, a.params), QuantTensor(w_cols, kt.params), timing)
            logits[i][p.row_offset:p.row_offset + a_rows.shape[0],
                      p.col_offset:p.col_offset + p.out_cols] = res.acc.values
        elif p.kind is PassKind.VPROJ:
            hq = qw.heads[i]
            res = run_pass(v_t, hq.wv, timing,
                           bias_acc=_to_acc_grid(dequantize(hq.bv)[0], v_t.scale * hq.wv.scale),
                           out_params=t2_params)
            temp2[i] = res.out
        elif p.kind is PassKind.AV:
            res = run_pass(softmax_out[i], temp2[i], timing, out_params=p_params)
            p_vals[:, i * D_K:(i + 1) * D_K] = res.out.values
        elif p.kind is PassKind.OUT_PROJ:
            blk = int(p.id.rsplit(".", 1)[1])
            p_t = QuantTensor(p_vals, p_params)
            w_blk = _col_block(qw.wg, blk)
            acc_scale = p_t.scale * w_blk.scale
            res = run_pass(
                p_t, w_blk, timing,
                bias_acc=_to_acc_grid(_vec_block(qw.bg, blk), acc_scale),
                residual_acc=_to_acc_grid(dequantize(_col_block(q_t, blk)), acc_scale),
            )
        else:  # pragma: no cover - plan_mha never emits FFN passes
            raise AssertionError(f"unexpected pass kind {p.kind}")

        start, end, stamps = tl.record(p, res.cycles, res.column_timestamps)

        if p.kind is PassKind.QKT and p.id == _last_qkt_id(plan, i):
            softmax_out[i] = scaled_masked_softmax(
                logits[i], mask, temp1[i].scale * temp2[i].scale)
            softmax_done[i] = end + softmax_latency(s, timing.softmax_pipeline_depth)
        elif p.kind is PassKind.VPROJ:
            windows.append(SoftmaxWindow(i, softmax_done[i], end))
            if softmax_done[i] > end:  # AV starts at vproj end and needs the output
                faults.append(i)
        elif p.kind is PassKind.OUT_PROJ:
            for j, stamp in enumerate(stamps):
                ln_unit.absorb_column(res.acc.values[:, j], ln_col)
                ln_col += 1
                del stamp

    out = ln_unit.normalize_output(dequantize(qw.gamma)[0], dequantize(qw.beta)[0], out_params)
    ln_done = tl.now + timing.layernorm_tail
    err = np.abs(dequantize(out) - inter.output) / out_params.scale
    report = CycleReport(
        per_pass=tuple(tl.traces),
        softmax_windows=tuple(windows),
        layernorm=(ln_done, ln_done),
        total_cycles=ln_done,
        scheduling_faults=tuple(faults),
        oracle_err_max_lsb=float(err.max()),
        oracle_err_mean_lsb=float(err.mean()),
    )
    return out, report


def _last_qkt_id(plan: PartitionPlan, head: int) -> str:
    return [p.id for p in plan.passes if p.kind is PassKind.QKT and p.head == head][-1]


def run_ffn(
    cfg: ModelConfig,
    qw: QuantizedResBlockWeights,
    x_t: QuantTensor,
    timing: SaTiming = SaTiming(),
) -> tuple[QuantTensor, CycleReport]:
    s, d, f = cfg.s, cfg.d_model, cfg.d_ff
    if (x_t.rows, x_t.cols) != (s, d):
        raise ValueError(f"X must be {s}x{d}, got {x_t.rows}x{x_t.cols}")
    if qw.w1.cols != f or qw.w2.rows != f:
        raise ValueError("weights do not match the model config")

    wf = dequantize_resblock_weights(qw)
    inter = ffn_intermediates(dequantize(x_t), wf)
    p_params = QuantParams(minmax_scale(np.array([inter.p_absmax])))
    out_params = QuantParams(minmax_scale(inter.output))

    plan = plan_ffn(cfg)
    tl = _Timeline(timing)
    ln_unit = StreamingLayerNorm(s, d)
    ln_col = 0
    p_vals = np.zeros((s, f), dtype=np.int64)

    for p in plan.passes:
        if p.kind is PassKind.FFN1:
            blk = int(p.id.rsplit(".", 1)[1])
            w_blk = _col_block(qw.w1, blk)
            res = run_pass(
                x_t, w_blk, timing,
                bias_acc=_to_acc_grid(_vec_block(qw.b1, blk), x_t.scale * w_blk.scale),
                relu=True, out_params=p_params)
            p_vals[:, blk * D_K:(blk + 1) * D_K] = res.out.values
        else:
            blk = int(p.id.rsplit(".", 1)[1])
            p_t = QuantTensor(p_vals, p_params)
            w_blk = _col_block(qw.w2, blk)
            acc_scale = p_t.scale * w_blk.scale
            res = run_pass(
                p_t, w_blk, timing,
                bias_acc=_to_acc_grid(_vec_block(qw.b2, blk), acc_scale),
                residual_acc=_to_acc_grid(dequantize(_col_block(x_t, blk)), acc_scale),
            )
        start, end, stamps = tl.record(p, res.cycles, res.column_timestamps)
        if p.kind is PassKind.FFN2:
            for j in range(res.acc.cols):
                ln_unit.absorb_column(res.acc.values[:, j], ln_col)
                ln_col += 1
        del start, stamps

    out = ln_unit.normalize_output(dequantize(qw.gamma)[0], dequantize(qw.beta)[0], out_params)
    ln_done = tl.now + timing.layernorm_tail
    err = np.abs(dequantize(out) - inter.output) / out_params.scale
    report = CycleReport(
        per_pass=tuple(tl.traces),
        softmax_windows=(),
        layernorm=(ln_done, ln_done),
        total_cycles=ln_done,
        scheduling_faults=(),
        oracle_err_max_lsb=float(err.max()),
        oracle_err_mean_lsb=float(err.mean()),
    )
    return out, report
