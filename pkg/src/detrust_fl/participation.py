"""Participation matrices: who is aggregated in which round, and with what weight.

Rows are rounds, columns are parties (1-based ids). Weights are exact
``Fraction`` values so inspection can compare them for equality.
"""
from __future__ import annotations

import json
import random
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .encoding import AVERAGE, FUSION_MODES, WEIGHTED
from .errors import InfeasibleConstraints, PreconditionError

ACCEPT = "accept"
REFUSE = "refuse"
VIOLATE_BP = "violate-BP"
SUGGEST = "suggest"


@dataclass(frozen=True)
class ParticipationMatrix:
    rows: tuple[tuple[Fraction, ...], ...]
    mode: str = AVERAGE

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise PreconditionError(f"unknown fusion mode {self.mode!r}")
        widths = {len(r) for r in self.rows}
        if len(widths) > 1:
            raise PreconditionError("ragged participation matrix")
        for r in self.rows:
            if any(w < 0 for w in r):
                raise PreconditionError("weights must be nonnegative")

    @property
    def m(self) -> int:
        return len(self.rows)

    @property
    def n(self) -> int:
        return len(self.rows[0]) if self.rows else 0

    def support(self, i: int) -> frozenset[int]:
        """Enrolled parties of round ``i`` (0-based round index)."""
        return frozenset(j + 1 for j, w in enumerate(self.rows[i]) if w != 0)

    def column(self, party: int) -> tuple[Fraction, ...]:
        return tuple(r[party - 1] for r in self.rows)

    def with_column(self, party: int, column: Sequence) -> "ParticipationMatrix":
        rows = [list(r) for r in self.rows]
        for i, w in enumerate(column):
            rows[i][party - 1] = Fraction(w)
        return ParticipationMatrix(tuple(tuple(r) for r in rows), self.mode)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "mode": self.mode,
            "rows": [[[w.numerator, w.denominator] for w in r] for r in self.rows],
        }

    @classmethod
    def from_json(cls, obj: Mapping | str) -> "ParticipationMatrix":
        if isinstance(obj, str):
            obj = json.loads(obj)
        rows = tuple(tuple(Fraction(int(a), int(b)) for a, b in r) for r in obj["rows"])
        mat = cls(rows, obj.get("mode", AVERAGE))
        if mat.m != obj["m"] or (mat.m and mat.n != obj["n"]):
            raise PreconditionError("declared shape does not match rows")
        return mat

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_supports(
        cls,
        supports: Iterable[Iterable[int]],
        n: int,
        mode: str = AVERAGE,
        sample_counts: Mapping[int, int] | None = None,
    ) -> "ParticipationMatrix":
        rows = tuple(fair_row(set(s), n, mode, sample_counts) for s in supports)
        return cls(rows, mode)


def fair_row(support: set[int], n: int, mode: str = AVERAGE,
             sample_counts: Mapping[int, int] | None = None) -> tuple[Fraction, ...]:
    """Weights an honest aggregator assigns to ``support``.

    Average fusion gives each enrolled party ``1/|support|``; weighted fusion
    is proportional to sample counts (FedAvg).
    """
    if not support:
        return tuple(Fraction(0) for _ in range(n))
    if mode == WEIGHTED and sample_counts:
        total = sum(sample_counts[j] for j in support)
        return tuple(Fraction(sample_counts[j], total) if j in support else Fraction(0)
                     for j in range(1, n + 1))
    k = len(support)
    return tuple(Fraction(1, k) if j in support else Fraction(0) for j in range(1, n + 1))


def renormalize(matrix: ParticipationMatrix, sample_counts=None) -> ParticipationMatrix:
    return ParticipationMatrix.from_supports(
        (matrix.support(i) for i in range(matrix.m)), matrix.n, matrix.mode, sample_counts
    )


@dataclass(frozen=True)
class TrustConfig:
    t_local: Mapping[int, int]
    t_bp: int = 2

    def __post_init__(self):
        if self.t_bp < 2:
            raise PreconditionError("t_bp must be >= 2")
        if not self.t_local:
            raise PreconditionError("no local thresholds")
        if self.t_g < 2:
            raise PreconditionError("global threshold must be >= 2")

    @property
    def t_g(self) -> int:
        return max(self.t_local.values())

    @classmethod
    def uniform(cls, n: int, t: int, t_bp: int = 2) -> "TrustConfig":
        return cls({j: t for j in range(1, n + 1)}, t_bp)


@dataclass(frozen=True)
class InspectionVerdict:
    kind: str
    suggested_column: tuple[Fraction, ...] | None = field(default=None)

    def __post_init__(self):
        if self.kind not in (ACCEPT, REFUSE, VIOLATE_BP, SUGGEST):
            raise PreconditionError(f"unknown verdict {self.kind!r}")
        if (self.kind == SUGGEST) != (self.suggested_column is not None):
            raise PreconditionError("only suggest verdicts carry a column")

    def to_json(self) -> dict:
        col = None
        if self.suggested_column is not None:
            col = [[w.numerator, w.denominator] for w in self.suggested_column]
        return {"kind": self.kind, "suggested_column": col}

    @classmethod
    def from_json(cls, obj: Mapping) -> "InspectionVerdict":
        col = obj.get("suggested_column")
        if col is not None:
            col = tuple(Fraction(int(a), int(b)) for a, b in col)
        return cls(obj["kind"], col)


def batch_classes(matrix: ParticipationMatrix) -> list[frozenset[int]]:
    """Partition parties by identical support columns."""
    groups: dict[tuple[bool, ...], set[int]] = defaultdict(set)
    for j in range(1, matrix.n + 1):
        groups[tuple(w != 0 for w in matrix.column(j))].add(j)
    return [frozenset(g) for g in groups.values()]


def check_bp(matrix: ParticipationMatrix, t_bp: int = 2) -> bool:
    """True when every class of parties that ever participates has at least ``t_bp`` members.

    Parties sharing a support column always appear together, so each round
    is a union of whole classes and no 0/1 combination of rounds can single
    out one party.
    """
    for cls in batch_classes(matrix):
        j = next(iter(cls))
        if any(w != 0 for w in matrix.column(j)) and len(cls) < t_bp:
            return False
    return True


def rows_meet_threshold(matrix: ParticipationMatrix, t_g: int) -> bool:
    return all(len(matrix.support(i)) >= t_g for i in range(matrix.m))


def disaggregation_rank_test(matrix: ParticipationMatrix) -> list[int]:
    """Parties whose indicator vector lies in the rational span of the round supports."""
    n = matrix.n
    basis: list[tuple[int, list[Fraction]]] = []  # (pivot column, reduced row)
    for i in range(matrix.m):
        vec = [Fraction(1) if w != 0 else Fraction(0) for w in matrix.rows[i]]
        vec = _reduce(vec, basis)
        piv = next((c for c, v in enumerate(vec) if v != 0), None)
        if piv is None:
            continue
        lead = vec[piv]
        vec = [v / lead for v in vec]
        # keep the basis fully reduced on pivot columns
        for k, (pc, row) in enumerate(basis):
            if row[piv] != 0:
                f = row[piv]
                basis[k] = (pc, [a - f * b for a, b in zip(row, vec)])
        basis.append((piv, vec))
    exposed = []
    for j in range(n):
        e = [Fraction(0)] * n
        e[j] = Fraction(1)
        if not any(_reduce(e, basis)):
            exposed.append(j + 1)
    return exposed


def _reduce(vec: list[Fraction], basis) -> list[Fraction]:
    vec = list(vec)
    for pc, row in basis:
        f = vec[pc]
        if f != 0:
            vec = [a - f * b for a, b in zip(vec, row)]
    return vec


def party_inspect(
    matrix: ParticipationMatrix,
    party_id: int,
    trust: TrustConfig,
    expected_column: Sequence,
    *,
    t_g: int | None = None,
) -> InspectionVerdict:
    """One party's verdict on a proposed matrix.

    Checks run in order: the global threshold against the party's own, batch
    partitioning, then every row's support size and the party's own weight.
    ``t_g`` is the threshold the aggregator announced (defaults to
    ``trust.t_g``).
    """
    if not 1 <= party_id <= matrix.n:
        raise PreconditionError(f"matrix has no column for party {party_id}")
    announced = trust.t_g if t_g is None else t_g
    if announced < trust.t_local[party_id]:
        return InspectionVerdict(REFUSE)
    if not check_bp(matrix, trust.t_bp):
        return InspectionVerdict(VIOLATE_BP)
    expected = tuple(Fraction(w) for w in expected_column)
    if len(expected) != matrix.m:
        raise PreconditionError("expected column length differs from round count")
    if not rows_meet_threshold(matrix, announced):
        return InspectionVerdict(REFUSE)
    if matrix.column(party_id) != expected:
        return InspectionVerdict(SUGGEST, expected)
    return InspectionVerdict(ACCEPT)


def propose_matrix(
    m: int,
    n: int,
    trust: TrustConfig,
    fusion_mode: str = AVERAGE,
    rng_seed: int = 0,
    *,
    parties: Sequence[int] | None = None,
    sample_counts: Mapping[int, int] | None = None,
) -> ParticipationMatrix:
    """A batch-partitioned matrix whose every row has support >= t_g.

    ``parties`` restricts enrollment to a subset (the other columns stay zero).
    Deterministic in ``rng_seed``.
    """
    if m < 1:
        raise PreconditionError("need at least one round")
    active = sorted(parties) if parties is not None else list(range(1, n + 1))
    t_g, t_bp = trust.t_g, trust.t_bp
    if t_g > len(active) or t_bp > len(active):
        raise InfeasibleConstraints(
            f"{len(active)} available parties cannot satisfy t_g={t_g}, t_bp={t_bp}"
        )
    rng = random.Random(rng_seed)
    order = active[:]
    rng.shuffle(order)
    nb = len(order) // t_bp
    batches = [sorted(order[b::nb]) for b in range(nb)]
    supports = []
    for _ in range(m):
        picked = [b for b in range(nb) if rng.random() < 0.5]
        rest = [b for b in range(nb) if b not in picked]
        rng.shuffle(rest)
        while sum(len(batches[b]) for b in picked) < t_g:
            picked.append(rest.pop())
        supports.append(set(picked))
    # every batch gets at least one round
    for b in range(nb):
        if not any(b in s for s in supports):
            supports[rng.randrange(m)].add(b)
    return ParticipationMatrix.from_supports(
        ({j for b in s for j in batches[b]} for s in supports), n, fusion_mode, sample_counts
    )
