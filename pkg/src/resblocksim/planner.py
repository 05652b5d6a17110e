"""Partitioning of the ResBlock GEMMs into s x 64 systolic-array passes.

The big weight matrices are split column-wise into d x 64 tiles (h tiles
for the output projection, 4h for the first feed-forward layer, h for the
second), so both ResBlocks run on one array. The query-key product is the
only operation whose output can exceed 64 columns: for s <= 64 it runs as
a single pass with idle output columns, for s > 64 the query rows are
split into groups and the output is produced in column chunks.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

from .config import D_K, ModelConfig


class PassKind(enum.Enum):
    QPROJ = "Qproj"
    KPROJ = "Kproj"
    VPROJ = "Vproj"
    QKT = "QKT"
    AV = "AV"
    OUT_PROJ = "OutProjBlock"
    FFN1 = "FFN1Block"
    FFN2 = "FFN2Block"


class QktStrategy(enum.Enum):
    ZERO_PAD = "ZeroPad"
    SPLIT_ROWS = "SplitRows"


@dataclass(frozen=True)
class GemmPass:
    id: str
    kind: PassKind
    stream_len: int
    out_cols: int
    weight_tile: str
    bias_tile: str | None = None
    residual_tile: str | None = None
    relu: bool = False
    feeds_softmax: bool = False
    head: int | None = None
    # Output placement for QKT sub-passes (row group / column chunk offsets
    # into the s x s logit matrix).
    row_offset: int = 0
    col_offset: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.out_cols <= D_K:
            raise ValueError(f"out_cols must be in [1, 64], got {self.out_cols}")
        if self.relu and self.kind is not PassKind.FFN1:
            raise ValueError("relu is only applied on first feed-forward passes")
        if self.residual_tile and self.kind not in (PassKind.OUT_PROJ, PassKind.FFN2):
            raise ValueError("residual add only applies to OutProj/FFN2 passes")


@dataclass(frozen=True)
class PartitionPlan:
    passes: tuple[GemmPass, ...]
    qkt_strategy: QktStrategy

    def stream_total(self) -> int:
        return sum(p.stream_len for p in self.passes)


def plan_qkt(s: int) -> QktStrategy:
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    return QktStrategy.ZERO_PAD if s <= D_K else QktStrategy.SPLIT_ROWS


def _qkt_passes(cfg: ModelConfig, head: int) -> list[GemmPass]:
    s = cfg.s
    if plan_qkt(s) is QktStrategy.ZERO_PAD:
        return [
            GemmPass(
                id=f"h{head}.qkt", kind=PassKind.QKT, stream_len=D_K, out_cols=s,
                weight_tile=f"temp2T.{head}", feeds_softmax=True, head=head,
            )
        ]
    groups = math.ceil(s / D_K)
    passes = []
    for g in range(groups):
        rows = min(D_K, s - g * D_K)
        for c in range(groups):
            cols = min(D_K, s - c * D_K)
            passes.append(
                GemmPass(
                    id=f"h{head}.qkt.g{g}c{c}", kind=PassKind.QKT, stream_len=D_K,
                    out_cols=cols, weight_tile=f"temp2T.{head}.c{c}",
                    feeds_softmax=True, head=head,
                    row_offset=g * D_K, col_offset=c * D_K,
                )
            )
            del rows
    return passes


def plan_mha(cfg: ModelConfig) -> PartitionPlan:
    d, s, h = cfg.d_model, cfg.s, cfg.h
    passes: list[GemmPass] = []
    for i in range(h):
        passes.append(GemmPass(f"h{i}.qproj", PassKind.QPROJ, d, D_K,
                               f"wq{i}", bias_tile=f"bq{i}", head=i))
        passes.append(GemmPass(f"h{i}.kproj", PassKind.KPROJ, d, D_K,
                               f"wk{i}", bias_tile=f"bk{i}", head=i))
        passes.extend(_qkt_passes(cfg, i))
        passes.append(GemmPass(f"h{i}.vproj", PassKind.VPROJ, d, D_K,
                               f"wv{i}", bias_tile=f"bv{i}", head=i))
        passes.append(GemmPass(f"h{i}.av", PassKind.AV, s, D_K,
                               f"temp2.{i}", head=i))
    for i in range(h):
        passes.append(GemmPass(f"outproj.{i}", PassKind.OUT_PROJ, d, D_K,
                               f"wg.{i}", bias_tile=f"bg.{i}",
                               residual_tile=f"q.{i}"))
    return PartitionPlan(tuple(passes), plan_qkt(s))


def plan_ffn(cfg: ModelConfig) -> PartitionPlan:
    d, f, h = cfg.d_model, cfg.d_ff, cfg.h
    assert f == 4 * d
    passes: list[GemmPass] = []
    for j in range(4 * h):
        passes.append(GemmPass(f"ffn1.{j}", PassKind.FFN1, d, D_K,
                               f"w1.{j}", bias_tile=f"b1.{j}", relu=True))
    for i in range(h):
        passes.append(GemmPass(f"ffn2.{i}", PassKind.FFN2, f, D_K,
                               f"w2.{i}", bias_tile=f"b2.{i}",
                               residual_tile=f"x.{i}"))
    return PartitionPlan(tuple(passes), plan_qkt(cfg.s))


def qkt_mult_ratio(s: int, h: int) -> Fraction:
    """Share of ResBlock multiplications spent on the query-key product."""
    if s < 1 or h < 1:
        raise ValueError("s and h must be >= 1")
    return Fraction(s, s + 256 * h * h + 64)
