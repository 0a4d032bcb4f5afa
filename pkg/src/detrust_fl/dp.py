"""Gaussian noise split across parties whose sum is protected by secure aggregation.

Each of ``t`` honest parties adds ``N(0, sigma_total^2 / t)`` per coordinate;
the aggregate then carries the full Gaussian-mechanism noise
``sigma_total = C * sqrt(2 ln(1.25/delta)) / epsilon``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError


@dataclass(frozen=True)
class DpConfig:
    enabled: bool = False
    epsilon: float = 1.0
    delta: float = 1e-5
    clip_norm: float = 1.0
    honest_count: int = 1

    def __post_init__(self):
        if self.enabled:
            if not self.epsilon > 0:
                raise PreconditionError("epsilon must be positive")
            if not 0 < self.delta < 1:
                raise PreconditionError("delta must lie in (0, 1)")
            if self.honest_count < 1:
                raise PreconditionError("honest_count must be >= 1")
            if not self.clip_norm > 0:
                raise PreconditionError("clip_norm must be positive")

    @property
    def sigma_total(self) -> float:
        return self.clip_norm * math.sqrt(2 * math.log(1.25 / self.delta)) / self.epsilon

    @property
    def sigma_party(self) -> float:
        return self.sigma_total / math.sqrt(self.honest_count)


def clip_l2(v: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm <= bound:
        return v
    return v * (bound / norm)


def dp_smc_noise(cfg: DpConfig, model: np.ndarray, rng: np.random.Generator,
                 reference: np.ndarray | None = None) -> np.ndarray:
    """Clip the update to ``clip_norm`` and add this party's share of the noise.

    With ``reference`` (the global model the party started from) the update
    is ``model - reference``; otherwise the model itself is clipped.
    """
    if not cfg.enabled:
        return model
    model = np.asarray(model, dtype=np.float64)
    base = np.zeros_like(model) if reference is None else np.asarray(reference, dtype=np.float64)
    update = clip_l2(model - base, cfg.clip_norm)
    return base + update + rng.normal(0.0, cfg.sigma_party, size=model.shape)
