"""Fixed-point conversion between float model parameters and the integer plaintext space.

Scaling is base 10: precision ``p`` keeps ``p`` digits after the decimal point,
so ``encode(x) = round(x * 10**p)`` with ties rounded away from zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import PreconditionError, ZeroSupport

AVERAGE = "average"
WEIGHTED = "weighted"
FUSION_MODES = (AVERAGE, WEIGHTED)


@dataclass(frozen=True)
class EncodingConfig:
    precision: int = 4
    weight_precision: int = 2
    clip_bound: float = 10.0

    def __post_init__(self):
        if self.precision < 0 or self.weight_precision < 0:
            raise PreconditionError("precisions must be nonnegative")
        if not self.clip_bound > 0:
            raise PreconditionError("clip_bound must be positive")
        if self.payload_bound >= 2**62:
            raise PreconditionError("clip_bound * 10**precision overflows int64")

    @property
    def scale(self) -> int:
        return 10**self.precision

    @property
    def weight_scale(self) -> int:
        return 10**self.weight_precision

    @property
    def payload_bound(self) -> int:
        return math.ceil(self.clip_bound * self.scale)

    def max_weight_scale(self, mode: str) -> int:
        """Largest single integerized weight the mode can produce."""
        return 1 if mode == AVERAGE else self.weight_scale


@dataclass
class EncodingStats:
    encoded: int = 0
    clipped: int = 0


def encode(cfg: EncodingConfig, v, stats: EncodingStats | None = None) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise PreconditionError("cannot encode non-finite values")
    clipped = np.clip(a, -cfg.clip_bound, cfg.clip_bound)
    if stats is not None:
        stats.encoded += a.size
        stats.clipped += int(np.count_nonzero(clipped != a))
    out = np.sign(clipped) * np.floor(np.abs(clipped) * cfg.scale + 0.5)
    return out.astype(np.int64)


def decode(cfg: EncodingConfig, v, total_weight_scale: int = 1) -> np.ndarray:
    if total_weight_scale < 1:
        raise PreconditionError("total_weight_scale must be >= 1")
    a = np.asarray([int(x) for x in v], dtype=np.float64)
    return a / (cfg.scale * total_weight_scale)


def integerize_weights(cfg: EncodingConfig, y: Sequence, mode: str = AVERAGE) -> tuple[list[int], int]:
    """Integer fusion weights and the divisor that undoes them after decryption.

    Average fusion puts weight 1 on every enrolled party and divides by the
    support size, so equal-weight fusion loses no precision. Weighted fusion
    rounds each weight to ``weight_precision`` digits.
    """
    if mode not in FUSION_MODES:
        raise PreconditionError(f"unknown fusion mode {mode!r}")
    ys = [Fraction(w) if not isinstance(w, float) else Fraction(w).limit_denominator(10**12) for w in y]
    if any(w < 0 for w in ys):
        raise PreconditionError("fusion weights must be nonnegative")
    support = [w > 0 for w in ys]
    if not any(support):
        raise ZeroSupport("fusion vector has no enrolled party")
    if mode == AVERAGE:
        return [1 if s else 0 for s in support], sum(support)
    scale = cfg.weight_scale
    scaled = [_round_half_up(w * scale) for w in ys]
    lost = [i + 1 for i, (w, s) in enumerate(zip(ys, scaled)) if w > 0 and s == 0]
    if lost:
        raise PreconditionError(
            f"weights of parties {lost} vanish at weight_precision={cfg.weight_precision}"
        )
    return scaled, scale


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))
