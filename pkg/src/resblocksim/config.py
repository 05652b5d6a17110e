"""Model geometry: (d_model, d_ff, h, s) with the standard preset table."""

from __future__ import annotations

from dataclasses import dataclass

D_K = 64  # per-head projection width; also the systolic array column count


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    d_ff: int
    h: int
    s: int
    batch: int = 1

    def __post_init__(self) -> None:
        if self.d_model != D_K * self.h:
            raise ValueError(f"d_model must equal 64*h, got {self.d_model} with h={self.h}")
        if self.d_ff != 4 * self.d_model:
            raise ValueError(f"d_ff must equal 4*d_model, got {self.d_ff}")
        if self.s < 1:
            raise ValueError(f"s must be >= 1, got {self.s}")
        if self.batch != 1:
            raise ValueError("only batch size 1 is modeled")


PRESETS = {
    "transformer-base": (512, 2048, 8),
    "transformer-big": (1024, 4096, 16),
    "bert-base": (768, 3072, 12),
    "bert-large": (1024, 4096, 16),
}


def preset_config(name: str, s: int) -> ModelConfig:
    try:
        d_model, d_ff, h = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown config preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(d_model=d_model, d_ff=d_ff, h=h, s=s)
