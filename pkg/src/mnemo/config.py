"""Model/memory configuration with desk-scale defaults.

Full-scale reference values (K=256, N=10240, K0=2560, W_gen=2048,
M=150000, d_proj=d/20) are kept in FULL_SCALE for documentation and for
the compression-arithmetic commands; everything trainable on a laptop uses
the desk-scale defaults below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict


FULL_SCALE = {
    "K": 256,
    "N": 10240,
    "K0": 2560,
    "W_gen": 2048,
    "M": 150_000,
    "N_total": 12_800,
}


def default_d_proj(d: int) -> int:
    """d/20 at full scale, floored at 4 so tiny hidden sizes stay usable."""
    return max(4, math.ceil(d / 20))


@dataclass
class ModelConfig:
    L: int = 4
    d: int = 64
    n_heads: int = 4
    vocab: int = 256
    W_gen: int = 64
    N: int = 64
    K: int = 8
    K0: int = 16
    M: int = 512
    d_proj: int = 0  # 0 -> derived from d
    d_ff: int = 0  # 0 -> 4*d
    lora_rank: int = 4
    retriever_per_layer: bool = False
    retriever_pooling: str = "max"  # max | mean over query positions

    def __post_init__(self):
        if self.d_proj == 0:
            self.d_proj = default_d_proj(self.d)
        if self.d_ff == 0:
            self.d_ff = 4 * self.d
        self.validate()

    def validate(self):
        checks = [
            (self.d % self.n_heads == 0, "d must be divisible by n_heads"),
            (0 < self.K < self.N, "require 0 < K < N"),
            (self.K0 >= 0, "K0 must be non-negative"),
            (self.M >= self.K, "M must be at least K"),
            (self.d_proj >= 1, "d_proj must be positive"),
            (self.W_gen >= 1, "W_gen must be positive"),
            (self.lora_rank >= 1, "lora_rank must be positive"),
            (self.retriever_pooling in ("max", "mean"), "pooling must be max|mean"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid ModelConfig: {msg}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class EvalConfig:
    n_probes: int = 16
    distractor_counts: list[int] = field(default_factory=lambda: [0, 2, 4, 8, 12, 16, 24])
    n_distractors: int = 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**d)
