"""Decentralized trust consensus over the participation matrix.

The aggregator proposes a matrix, every party inspects its own view and
answers with a verdict, and the aggregator folds suggestions back in until
everyone accepts. Each party then derives one key fragment per round from
the matrix it accepted; the aggregator ends up with an ``m x n`` fragment
table and never sees a party secret.

Parties are addressed through an ``exchange(party_id, msg_type, payload)``
callable returning ``(reply_type, reply_payload)`` so the same driver runs
over direct calls or a transport.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

from . import dmcfe
from .encoding import EncodingConfig, integerize_weights
from .errors import (
    ConsensusTimeout,
    InfeasibleConstraints,
    PartyRefusal,
    PreconditionError,
    RefusedMatrix,
)
from .participation import (
    ACCEPT,
    SUGGEST,
    InspectionVerdict,
    ParticipationMatrix,
    TrustConfig,
    check_bp,
    fair_row,
    party_inspect,
    propose_matrix,
    renormalize,
    rows_meet_threshold,
)

logger = logging.getLogger(__name__)

MAX_NEGOTIATION_ROUNDS = 10

# message types used on the consensus channel
DTC_THRESHOLD = "DTC_THRESHOLD"
DTC_PROPOSE = "DTC_PROPOSE"
DTC_VERDICT = "DTC_VERDICT"
DTC_KEYFRAGS = "DTC_KEYFRAGS"
ABORT = "ABORT"


class Phase(enum.Enum):
    COLLECT_THRESHOLDS = "CollectThresholds"
    PROPOSING = "Proposing"
    AWAIT_VERDICTS = "AwaitVerdicts"
    FINALIZING = "Finalizing"
    DONE = "Done"
    ABORTED = "Aborted"


_TRANSITIONS = {
    Phase.COLLECT_THRESHOLDS: {Phase.PROPOSING, Phase.ABORTED},
    Phase.PROPOSING: {Phase.AWAIT_VERDICTS, Phase.ABORTED},
    Phase.AWAIT_VERDICTS: {Phase.PROPOSING, Phase.FINALIZING, Phase.ABORTED},
    Phase.FINALIZING: {Phase.DONE, Phase.ABORTED},
    Phase.DONE: set(),
    Phase.ABORTED: set(),
}


@dataclass
class DtcAggregatorState:
    phase: Phase = Phase.COLLECT_THRESHOLDS
    current_proposal: ParticipationMatrix | None = None
    verdicts: dict[int, InspectionVerdict] = field(default_factory=dict)
    negotiation_round: int = 0
    t_g: int | None = None
    max_negotiation_rounds: int = MAX_NEGOTIATION_ROUNDS
    history: list[Phase] = field(default_factory=lambda: [Phase.COLLECT_THRESHOLDS])

    def advance(self, phase: Phase) -> None:
        if phase not in _TRANSITIONS[self.phase]:
            raise PreconditionError(f"illegal consensus transition {self.phase.value} -> {phase.value}")
        self.phase = phase
        self.history.append(phase)


@dataclass
class KeyFragmentMatrix:
    """``m x n`` table of partial decryption keys; row ``i`` serves round ``i + 1``."""

    m: int
    n: int
    table: list[list[dmcfe.PartialDecryptionKey | None]] = field(default=None)

    def __post_init__(self):
        if self.table is None:
            self.table = [[None] * self.n for _ in range(self.m)]

    def fill_column(self, party: int, fragments: Sequence[dmcfe.PartialDecryptionKey]) -> None:
        if len(fragments) != self.m:
            raise PreconditionError(f"party {party} sent {len(fragments)} fragments for {self.m} rounds")
        for i, f in enumerate(fragments):
            if f.party_id != party:
                raise PreconditionError(f"fragment for party {f.party_id} in column {party}")
            self.table[i][party - 1] = f

    def row(self, i: int) -> list[dmcfe.PartialDecryptionKey]:
        return [f for f in self.table[i] if f is not None]

    def column(self, party: int) -> list[dmcfe.PartialDecryptionKey]:
        return [r[party - 1] for r in self.table]

    @property
    def complete(self) -> bool:
        return all(f is not None for r in self.table for f in r)


# --- party side --------------------------------------------------------------

@dataclass(frozen=True)
class ExpectationPolicy:
    """What a party expects its own column to look like.

    ``fair``: any enrollment pattern, but the weight in enrolled rounds must
    be the fair share for the row. ``every-round``: enrolled in every round
    at the fair share. ``fixed``: an explicit column.
    """

    kind: str = "fair"
    column: tuple[Fraction, ...] | None = None

    def expected_column(self, matrix: ParticipationMatrix, party: int,
                        sample_counts: Mapping[int, int] | None = None) -> tuple[Fraction, ...]:
        if self.kind == "fixed":
            if self.column is None or len(self.column) != matrix.m:
                raise PreconditionError("fixed policy column does not match the round count")
            return tuple(Fraction(w) for w in self.column)
        out = []
        for i in range(matrix.m):
            support = set(matrix.support(i))
            if self.kind == "every-round":
                support.add(party)
            elif self.kind != "fair":
                raise PreconditionError(f"unknown expectation policy {self.kind!r}")
            if party in support:
                out.append(fair_row(support, matrix.n, matrix.mode, sample_counts)[party - 1])
            else:
                out.append(Fraction(0))
        return tuple(out)


def row_fusion_tag(matrix: ParticipationMatrix, i: int, cfg: EncodingConfig, session: bytes = b"") -> tuple[list[int], bytes]:
    """Integer weights and fusion tag for round ``i + 1`` of ``matrix``."""
    y, _ = integerize_weights(cfg, matrix.rows[i], matrix.mode)
    return y, dmcfe.make_fusion_tag(i + 1, y, session)


class DtcParty:
    """Party-side responder; remembers every matrix it accepted."""

    def __init__(self, party_id: int, pp: dmcfe.PublicParams, sk: dmcfe.PartySecretKey | None,
                 t_local: int, *, policy: ExpectationPolicy | None = None,
                 encoding: EncodingConfig | None = None, session: bytes = b"",
                 sample_counts: Mapping[int, int] | None = None):
        self.party_id = party_id
        self.pp = pp
        self.sk = sk
        self.t_local = t_local
        self.policy = policy or ExpectationPolicy()
        self.encoding = encoding or EncodingConfig()
        self.session = session
        self.sample_counts = dict(sample_counts) if sample_counts else None
        self.accepted: set[bytes] = set()
        self.agreed_matrix: ParticipationMatrix | None = None

    def inspect(self, matrix: ParticipationMatrix, t_g: int, t_bp: int) -> InspectionVerdict:
        trust = TrustConfig({self.party_id: self.t_local}, t_bp)
        expected = self.policy.expected_column(matrix, self.party_id, self.sample_counts)
        verdict = party_inspect(matrix, self.party_id, trust, expected, t_g=t_g)
        if verdict.kind == ACCEPT:
            self.accepted.add(matrix.canonical_bytes())
        return verdict

    def generate_fragments(self, matrix: ParticipationMatrix) -> list[dmcfe.PartialDecryptionKey]:
        if matrix.canonical_bytes() not in self.accepted:
            raise RefusedMatrix(f"party {self.party_id} never accepted this matrix")
        if self.sk is None:
            raise PreconditionError(f"party {self.party_id} has no secret key yet")
        frags = []
        for i in range(matrix.m):
            y, tag = row_fusion_tag(matrix, i, self.encoding, self.session)
            frags.append(dmcfe.key_der_share(self.pp, self.sk, y, tag))
        self.agreed_matrix = matrix
        return frags

    def handle(self, msg_type: str, payload: Mapping) -> tuple[str, dict]:
        if msg_type == DTC_THRESHOLD:
            return DTC_THRESHOLD, {"party": self.party_id, "t_local": self.t_local}
        if msg_type == DTC_PROPOSE:
            matrix = ParticipationMatrix.from_json(payload["matrix"])
            verdict = self.inspect(matrix, int(payload["t_g"]), int(payload["t_bp"]))
            return DTC_VERDICT, {"party": self.party_id, **verdict.to_json()}
        if msg_type == DTC_KEYFRAGS:
            matrix = ParticipationMatrix.from_json(payload["matrix"])
            try:
                frags = self.generate_fragments(matrix)
            except RefusedMatrix as exc:
                return ABORT, {"party": self.party_id, "reason": str(exc)}
            return DTC_KEYFRAGS, {"party": self.party_id, "fragments": [f.to_json() for f in frags]}
        raise PreconditionError(f"party cannot handle {msg_type}")


def generate_fragments(party: DtcParty, final_matrix: ParticipationMatrix) -> list[dmcfe.PartialDecryptionKey]:
    return party.generate_fragments(final_matrix)


# --- aggregator side ---------------------------------------------------------

def aggregator_merge_suggestions(
    proposal: ParticipationMatrix,
    verdicts: Mapping[int, InspectionVerdict],
    trust: TrustConfig,
    *,
    sample_counts: Mapping[int, int] | None = None,
    rng_seed: int = 0,
    excluded: set[int] | None = None,
) -> tuple[ParticipationMatrix, set[int]]:
    """Fold party suggestions into a new proposal.

    A suggestion is spliced in when the renormalized matrix still passes the
    batch-partitioning and threshold checks; otherwise the suggesting party's
    column is zeroed. If zeroing breaks the checks the matrix is re-proposed
    over the remaining parties. Returns the new proposal and the set of
    parties whose suggestion was rejected.
    """
    excluded = set(excluded or ())
    rejected: set[int] = set()
    current = proposal
    for party in sorted(verdicts):
        v = verdicts[party]
        if v.kind != SUGGEST:
            continue
        candidate = renormalize(current.with_column(party, v.suggested_column), sample_counts)
        if _valid(candidate, trust):
            current = candidate
            excluded.discard(party)
        else:
            current = renormalize(current.with_column(party, [0] * current.m), sample_counts)
            rejected.add(party)
            excluded.add(party)
    if not _valid(current, trust):
        remaining = [j for j in range(1, current.n + 1) if j not in excluded]
        try:
            current = propose_matrix(current.m, current.n, trust, current.mode, rng_seed,
                                     parties=remaining, sample_counts=sample_counts)
        except InfeasibleConstraints:
            raise
    return current, rejected


def _valid(matrix: ParticipationMatrix, trust: TrustConfig) -> bool:
    return check_bp(matrix, trust.t_bp) and rows_meet_threshold(matrix, trust.t_g)


Exchange = Callable[[int, str, dict], tuple[str, dict]]


class ConsensusAggregator:
    """Aggregator-side driver. Subclasses may override :meth:`view_for`."""

    def __init__(self, n: int, m: int, *, t_bp: int = 2, fusion_mode: str = "average",
                 sample_counts: Mapping[int, int] | None = None, seed: int = 0,
                 max_negotiation_rounds: int = MAX_NEGOTIATION_ROUNDS):
        self.n = n
        self.m = m
        self.t_bp = t_bp
        self.fusion_mode = fusion_mode
        self.sample_counts = dict(sample_counts) if sample_counts else None
        self.seed = seed
        self.state = DtcAggregatorState(max_negotiation_rounds=max_negotiation_rounds)
        self.trust: TrustConfig | None = None

    def view_for(self, party: int, proposal: ParticipationMatrix) -> ParticipationMatrix:
        return proposal

    def initial_proposal(self) -> ParticipationMatrix:
        return propose_matrix(self.m, self.n, self.trust, self.fusion_mode, self.seed,
                              sample_counts=self.sample_counts)

    def _abort(self, exchange: Exchange, reason: str) -> None:
        self.state.advance(Phase.ABORTED)
        for j in range(1, self.n + 1):
            try:
                exchange(j, ABORT, {"reason": reason})
            except Exception:  # best effort notification
                logger.debug("abort notification to party %d failed", j)

    def collect_thresholds(self, exchange: Exchange) -> int:
        t_local = {}
        for j in range(1, self.n + 1):
            _, reply = exchange(j, DTC_THRESHOLD, {})
            t_local[j] = int(reply["t_local"])
        self.trust = TrustConfig(t_local, self.t_bp)
        self.state.t_g = self.trust.t_g
        return self.trust.t_g

    def propose(self, exchange: Exchange, proposal: ParticipationMatrix) -> dict[int, InspectionVerdict]:
        st = self.state
        st.current_proposal = proposal
        st.negotiation_round += 1
        st.advance(Phase.AWAIT_VERDICTS)
        st.verdicts = {}
        for j in range(1, self.n + 1):
            view = self.view_for(j, proposal)
            _, reply = exchange(j, DTC_PROPOSE, {
                "matrix": view.to_json(), "t_g": st.t_g, "t_bp": self.t_bp,
                "negotiation_round": st.negotiation_round,
            })
            st.verdicts[j] = InspectionVerdict.from_json(reply)
        return st.verdicts

    def collect_fragments(self, exchange: Exchange, proposal: ParticipationMatrix) -> KeyFragmentMatrix:
        frags = KeyFragmentMatrix(proposal.m, self.n)
        for j in range(1, self.n + 1):
            kind, reply = exchange(j, DTC_KEYFRAGS, {"matrix": self.view_for(j, proposal).to_json()})
            if kind != DTC_KEYFRAGS:
                raise PartyRefusal([j], reply.get("reason", "fragment generation refused"))
            frags.fill_column(j, [dmcfe.PartialDecryptionKey.from_json(f) for f in reply["fragments"]])
        return frags

    def run(self, exchange: Exchange) -> tuple[ParticipationMatrix, KeyFragmentMatrix]:
        st = self.state
        try:
            self.collect_thresholds(exchange)
            proposal = self.initial_proposal()
        except InfeasibleConstraints as exc:
            self._abort(exchange, str(exc))
            raise
        excluded: set[int] = set()
        rejected_columns: dict[int, tuple] = {}
        st.advance(Phase.PROPOSING)
        while True:
            verdicts = self.propose(exchange, proposal)
            if all(v.kind == ACCEPT for v in verdicts.values()):
                break
            stuck = [j for j, v in verdicts.items()
                     if v.kind == SUGGEST and rejected_columns.get(j) == v.suggested_column]
            if stuck:
                self._abort(exchange, f"parties {stuck} insist on rejected columns")
                raise PartyRefusal(stuck, "suggestion incompatible with batch partitioning")
            if st.negotiation_round >= st.max_negotiation_rounds:
                self._abort(exchange, "negotiation round limit reached")
                raise ConsensusTimeout(f"no agreement after {st.negotiation_round} negotiation rounds")
            try:
                proposal, rejected = aggregator_merge_suggestions(
                    proposal, verdicts, self.trust, sample_counts=self.sample_counts,
                    rng_seed=self.seed + st.negotiation_round, excluded=excluded,
                )
            except InfeasibleConstraints as exc:
                self._abort(exchange, str(exc))
                raise
            for j in rejected:
                rejected_columns[j] = verdicts[j].suggested_column
            excluded |= rejected
            st.advance(Phase.PROPOSING)
        st.advance(Phase.FINALIZING)
        try:
            fragments = self.collect_fragments(exchange, proposal)
        except Exception as exc:
            self._abort(exchange, str(exc))
            raise
        st.advance(Phase.DONE)
        logger.info("consensus reached after %d negotiation round(s), t_g=%d",
                    st.negotiation_round, st.t_g)
        return proposal, fragments


def direct_exchange(parties: Mapping[int, DtcParty]) -> Exchange:
    def exchange(party: int, msg_type: str, payload: dict):
        if msg_type == ABORT:
            return ABORT, {}
        return parties[party].handle(msg_type, payload)
    return exchange


def run_consensus(
    aggregator: ConsensusAggregator,
    parties: Mapping[int, DtcParty] | Sequence[DtcParty],
    exchange: Exchange | None = None,
) -> tuple[ParticipationMatrix, KeyFragmentMatrix]:
    """Negotiate a participation matrix and collect the ``m x n`` fragment table."""
    if not isinstance(parties, Mapping):
        parties = {p.party_id: p for p in parties}
    return aggregator.run(exchange or direct_exchange(parties))
