"""Double-precision reference for the attention and feed-forward ResBlocks.

Every fixed-point module in the simulator is validated against the
functions here. The masked softmax excludes illegal positions from the
normalizing sum (they contribute exact zeros to the output), and layer
normalization uses population variance with eps = 1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import D_K, ModelConfig

LN_EPS = 1e-8


@dataclass(frozen=True)
class HeadWeights:
    w_q: np.ndarray  # d_model x 64
    w_k: np.ndarray
    w_v: np.ndarray
    b_q: np.ndarray  # length 64
    b_k: np.ndarray
    b_v: np.ndarray


@dataclass(frozen=True)
class ResBlockWeights:
    heads: list[HeadWeights]
    w_g: np.ndarray  # d_model x d_model
    b_g: np.ndarray  # length d_model
    w_1: np.ndarray  # d_model x d_ff
    b_1: np.ndarray  # length d_ff
    w_2: np.ndarray  # d_ff x d_model
    b_2: np.ndarray  # length d_model
    gamma: np.ndarray  # length d_model
    beta: np.ndarray  # length d_model


def validate_mask(mask: np.ndarray, s: int) -> np.ndarray:
    """Mask entries are {0,1}; 1 marks an illegal position. Each row needs a 0."""
    m = np.asarray(mask)
    if m.shape != (s, s):
        raise ValueError(f"mask must be {s}x{s}, got {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    if (m == 1).all(axis=1).any():
        row = int(np.argwhere((m == 1).all(axis=1))[0][0])
        raise ValueError(f"mask row {row} is fully masked; softmax undefined")
    return m.astype(np.int64)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over unmasked positions; masked outputs are exactly 0."""
    legal = mask == 0
    shifted = np.where(legal, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(legal, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def ref_layernorm_row(g: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    mean = g.mean()
    var = np.mean((g - mean) ** 2)
    return (g - mean) / np.sqrt(var + LN_EPS) * gamma + beta


def _layernorm(g: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mean = g.mean(axis=1, keepdims=True)
    var = np.mean((g - mean) ** 2, axis=1, keepdims=True)
    return (g - mean) / np.sqrt(var + LN_EPS) * gamma + beta


def ref_attention_head(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, w: HeadWeights, mask: np.ndarray
) -> np.ndarray:
    s = q.shape[0]
    m = validate_mask(mask, s)
    qp = q @ w.w_q + w.b_q
    kp = k @ w.w_k + w.b_k
    vp = v @ w.w_v + w.b_v
    logits = (qp @ kp.T) / np.sqrt(D_K)
    return masked_softmax(logits, m) @ vp


def ref_mha_resblock(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, w: ResBlockWeights, mask: np.ndarray
) -> np.ndarray:
    p = np.hstack([ref_attention_head(q, k, v, hw, mask) for hw in w.heads])
    g = p @ w.w_g + w.b_g + q
    return _layernorm(g, w.gamma, w.beta)


def ref_ffn_resblock(x: np.ndarray, w: ResBlockWeights) -> np.ndarray:
    inner = np.maximum(x @ w.w_1 + w.b_1, 0.0)
    g = inner @ w.w_2 + w.b_2 + x
    return _layernorm(g, w.gamma, w.beta)


@dataclass(frozen=True)
class MhaIntermediates:
    """Per-tensor value ranges used to calibrate activation scales, plus
    the reference output for error reporting."""

    temp1_absmax: float  # query projections, all heads
    temp2_absmax: float  # key and value projections share one buffer/scale
    p_absmax: float      # concatenated head outputs
    output: np.ndarray


@dataclass(frozen=True)
class FfnIntermediates:
    p_absmax: float      # ReLU layer output
    output: np.ndarray


def mha_intermediates(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, w: ResBlockWeights, mask: np.ndarray
) -> MhaIntermediates:
    s = q.shape[0]
    m = validate_mask(mask, s)
    t1 = t2 = pmax = 0.0
    blocks = []
    for hw in w.heads:
        qp = q @ hw.w_q + hw.b_q
        kp = k @ hw.w_k + hw.b_k
        vp = v @ hw.w_v + hw.b_v
        t1 = max(t1, np.abs(qp).max())
        t2 = max(t2, np.abs(kp).max(), np.abs(vp).max())
        head_out = masked_softmax((qp @ kp.T) / np.sqrt(D_K), m) @ vp
        pmax = max(pmax, np.abs(head_out).max())
        blocks.append(head_out)
    p = np.hstack(blocks)
    g = p @ w.w_g + w.b_g + q
    return MhaIntermediates(t1, t2, pmax, _layernorm(g, w.gamma, w.beta))


def ffn_intermediates(x: np.ndarray, w: ResBlockWeights) -> FfnIntermediates:
    inner = np.maximum(x @ w.w_1 + w.b_1, 0.0)
    g = inner @ w.w_2 + w.b_2 + x
    return FfnIntermediates(float(np.abs(inner).max()), _layernorm(g, w.gamma, w.beta))


def random_resblock_weights(cfg: ModelConfig, rng: np.random.Generator) -> ResBlockWeights:
    """Seeded random weights with magnitudes typical of a trained block."""
    d, f = cfg.d_model, cfg.d_ff
    wstd = 1.0 / np.sqrt(d)

    def mat(r, c, std):
        return rng.normal(0.0, std, size=(r, c))

    heads = [
        HeadWeights(
            w_q=mat(d, D_K, wstd), w_k=mat(d, D_K, wstd), w_v=mat(d, D_K, wstd),
            b_q=rng.normal(0.0, 0.02, D_K), b_k=rng.normal(0.0, 0.02, D_K),
            b_v=rng.normal(0.0, 0.02, D_K),
        )
        for _ in range(cfg.h)
    ]
    return ResBlockWeights(
        heads=heads,
        w_g=mat(d, d, wstd), b_g=rng.normal(0.0, 0.02, d),
        w_1=mat(d, f, wstd), b_1=rng.normal(0.0, 0.02, f),
        w_2=mat(f, d, 1.0 / np.sqrt(f)), b_2=rng.normal(0.0, 0.02, d),
        gamma=rng.uniform(0.8, 1.2, d), beta=rng.normal(0.0, 0.1, d),
    )
