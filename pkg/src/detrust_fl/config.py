"""Run configuration shared by the engine, the CLI and the demos."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dp import DpConfig
from .encoding import FUSION_MODES, EncodingConfig
from .errors import InfeasibleConstraints, PreconditionError
from .participation import TrustConfig
from .trainer import Hyperparams

SIM = "sim"
TCP = "tcp"
SECURE = "secure"
PLAINTEXT = "plaintext"


@dataclass
class DatasetSpec:
    """Synthetic Gaussian blobs (``kind="blobs"``) or per-party CSV files (``kind="csv"``)."""

    kind: str = "blobs"
    n_samples: int = 2000
    n_features: int = 10
    n_classes: int = 3
    separation: float = 3.0
    partition: str = "iid"
    test_fraction: float = 0.2
    party_paths: list[str] = field(default_factory=list)
    test_path: str | None = None


@dataclass
class RunConfig:
    mode: str = SIM
    protocol: str = SECURE
    m: int = 20
    n: int = 5
    fusion: str = "average"
    weights_from_samples: bool = False
    precision: int = 4
    weight_precision: int = 2
    clip_bound: float = 10.0
    t_local: int | list[int] = 3
    t_bp: int = 2
    max_negotiation_rounds: int = 10
    learning_rate: float = 0.01
    local_epochs: int = 3
    batch_size: int = 16
    dp: DpConfig = field(default_factory=DpConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0
    lambda_bits: int = 2048
    group_seed: int | None = None
    allow_insecure: bool | None = None
    hosts: dict[str, list] = field(default_factory=dict)
    out: str | None = None

    # --- derived views --------------------------------------------------------

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(self.precision, self.weight_precision, self.clip_bound)

    @property
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.learning_rate, self.local_epochs, self.batch_size)

    @property
    def thresholds(self) -> dict[int, int]:
        if isinstance(self.t_local, int):
            return {j: self.t_local for j in range(1, self.n + 1)}
        return {j: int(t) for j, t in enumerate(self.t_local, start=1)}

    @property
    def trust(self) -> TrustConfig:
        return TrustConfig(self.thresholds, self.t_bp)

    @property
    def fusion_mode(self) -> str:
        return "weighted" if self.weights_from_samples else self.fusion

    # --- validation and persistence ------------------------------------------

    def validate(self) -> "RunConfig":
        if self.mode not in (SIM, TCP):
            raise PreconditionError(f"mode must be sim or tcp, got {self.mode!r}")
        if self.protocol not in (SECURE, PLAINTEXT):
            raise PreconditionError(f"protocol must be secure or plaintext, got {self.protocol!r}")
        if self.m < 1 or self.n < 2:
            raise PreconditionError("need m >= 1 rounds and n >= 2 parties")
        if self.fusion not in FUSION_MODES:
            raise PreconditionError(f"unknown fusion mode {self.fusion!r}")
        if not isinstance(self.t_local, int) and len(self.t_local) != self.n:
            raise PreconditionError("t_local list must have one entry per party")
        trust = self.trust
        if trust.t_g > self.n or self.t_bp > self.n:
            raise InfeasibleConstraints(f"t_g={trust.t_g}, t_bp={self.t_bp} exceed n={self.n}")
        self.encoding  # runs EncodingConfig checks
        if self.dataset.kind == "csv" and len(self.dataset.party_paths) != self.n:
            raise PreconditionError("csv dataset needs one path per party")
        if self.dataset.kind not in ("blobs", "csv"):
            raise PreconditionError(f"unknown dataset kind {self.dataset.kind!r}")
        return self

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "RunConfig":
        obj = dict(obj)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise PreconditionError(f"unknown config keys: {sorted(unknown)}")
        if "dp" in obj and isinstance(obj["dp"], dict):
            obj["dp"] = DpConfig(**obj["dp"])
        if "dataset" in obj and isinstance(obj["dataset"], dict):
            obj["dataset"] = DatasetSpec(**obj["dataset"])
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)
