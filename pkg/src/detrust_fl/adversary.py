"""Malicious-aggregator harness for the inference attacks the protocol defends against.

Every attack runs the real engine: a :class:`MaliciousAggregator` replaces the
honest one and scripts its consensus proposals, the matrix views it shows
each party, or the ciphertexts it feeds to decryption. Honest parties are the
unmodified :class:`~detrust_fl.engine.Party`. Colluding parties accept any
matrix and reveal their own plaintext updates to the aggregator.

An attack only counts as ``Succeeded`` when the harness recovers a target
update within encoding tolerance of the ground truth.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import dmcfe
from .config import DatasetSpec, RunConfig
from .dtc import ACCEPT, ConsensusAggregator, DtcParty, Phase
from .encoding import decode, encode
from .engine import Aggregator, Federation, _seed
from .errors import DecryptionFailure, DetrustError, DlogNotFound, MixedFusionTag
from .participation import InspectionVerdict, ParticipationMatrix, disaggregation_rank_test, renormalize

logger = logging.getLogger(__name__)

ISOLATION_NO_COLLUSION = "IsolationNoCollusion"
ISOLATION_WITH_COLLUSION = "IsolationWithCollusion"
DISAGGREGATION = "Disaggregation"
REPLAY = "Replay"
TWO_FACED = "TwoFacedMatrix"
ATTACKS = (ISOLATION_NO_COLLUSION, ISOLATION_WITH_COLLUSION, DISAGGREGATION, REPLAY, TWO_FACED)

BLOCKED_BY_INSPECTION = "BlockedByInspection"
BLOCKED_BY_KEY_BINDING = "BlockedByKeyBinding"
BLOCKED_BY_LABEL = "BlockedByLabel"
SUCCEEDED = "Succeeded"
NO_EXPOSURE = "NoExposure"
OUTCOMES = (BLOCKED_BY_INSPECTION, BLOCKED_BY_KEY_BINDING, BLOCKED_BY_LABEL, SUCCEEDED, NO_EXPOSURE)


@dataclass
class AttackReport:
    attack: str
    outcome: str
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")

    @property
    def blocked(self) -> bool:
        return self.outcome.startswith("Blocked")

    def to_json(self) -> dict:
        return {"attack": self.attack, "outcome": self.outcome, "evidence": self.evidence}


def attack_config(n: int = 5, t_g: int = 3, m: int = 1, *, seed: int = 0, t_bp: int = 2,
                  lambda_bits: int = 128, precision: int = 4) -> RunConfig:
    """Small federation for attack runs.

    The group is deliberately far larger than 16 bits: with a tiny group a
    garbage decryption lands inside the dlog window often enough to blur the
    distinction between a blocked and a successful attack.
    """
    return RunConfig(
        m=m, n=n, t_local=t_g, t_bp=t_bp, seed=seed, precision=precision,
        lambda_bits=lambda_bits, group_seed=seed, allow_insecure=True,
        dataset=DatasetSpec(n_samples=60 * n, n_features=4, n_classes=2),
    )


# --- attacker-side roles ------------------------------------------------------

class CollusiveDtcParty(DtcParty):
    """Accepts whatever matrix it is shown."""

    def inspect(self, matrix, t_g, t_bp):
        self.accepted.add(matrix.canonical_bytes())
        return InspectionVerdict(ACCEPT)


class InspectionBlocked(DetrustError):
    def __init__(self, verdicts: dict[int, InspectionVerdict]):
        self.verdicts = verdicts
        bad = {j: v.kind for j, v in verdicts.items() if v.kind != ACCEPT}
        super().__init__(f"proposal rejected: {bad}")


class ScriptedConsensus(ConsensusAggregator):
    """Proposes one crafted matrix, optionally a different view per party, and never negotiates."""

    crafted: ParticipationMatrix | None = None
    views: dict[int, ParticipationMatrix] | None = None
    announce_t_g: int | None = None

    def initial_proposal(self):
        return self.crafted if self.crafted is not None else super().initial_proposal()

    def view_for(self, party, proposal):
        if self.views and party in self.views:
            return self.views[party]
        return proposal

    def run(self, exchange):
        self.collect_thresholds(exchange)
        if self.announce_t_g is not None:
            self.state.t_g = self.announce_t_g
        proposal = self.initial_proposal()
        self.state.advance(Phase.PROPOSING)
        verdicts = self.propose(exchange, proposal)
        if not all(v.kind == ACCEPT for v in verdicts.values()):
            self._abort(exchange, "proposal rejected")
            raise InspectionBlocked(verdicts)
        self.state.advance(Phase.FINALIZING)
        fragments = self.collect_fragments(exchange, proposal)
        self.state.advance(Phase.DONE)
        return proposal, fragments


class MaliciousAggregator(Aggregator):
    """Aggregator whose consensus and ciphertext handling the harness scripts."""

    script: dict = {}

    def make_consensus(self):
        cfg = self.cfg
        c = ScriptedConsensus(cfg.n, cfg.m, t_bp=cfg.t_bp, fusion_mode=cfg.fusion_mode, seed=cfg.seed,
                              max_negotiation_rounds=cfg.max_negotiation_rounds)
        c.crafted = self.script.get("crafted")
        c.views = self.script.get("views")
        c.announce_t_g = self.script.get("announce_t_g")
        return c

    def tamper_ciphertexts(self, round_index, cts):
        hook = self.script.get("tamper")
        return hook(round_index, cts) if hook else cts


def _federation(cfg: RunConfig, script: dict, *, colluders: Iterable[int] = (),
                update_override=None) -> Federation:
    agg_cls = type("ScriptedAggregator", (MaliciousAggregator,), {"script": script})
    return Federation(cfg, aggregator_cls=agg_cls, update_override=update_override,
                      party_dtc={j: CollusiveDtcParty for j in colluders})


def _trace_excerpt(fed: Federation, k: int = 4, width: int = 240) -> list[str]:
    return [line.decode(errors="replace").strip()[:width] for line in fed.transport.trace[-k:]]


def _verdict_kinds(verdicts, honest) -> dict[str, str]:
    return {str(j): v.kind for j, v in sorted(verdicts.items()) if j in honest}


def _quantized(cfg: RunConfig, v: np.ndarray) -> np.ndarray:
    return decode(cfg.encoding, encode(cfg.encoding, v))


def _matrix_from_supports(supports: Sequence[Iterable[int]], cfg: RunConfig) -> ParticipationMatrix:
    return ParticipationMatrix.from_supports([set(s) for s in supports], cfg.n, cfg.fusion_mode)


def _static_updates(cfg: RunConfig, dim: int) -> dict[int, np.ndarray]:
    return {j: np.random.default_rng(_seed(cfg.seed, "static-update", j)).uniform(-1, 1, dim)
            for j in range(1, cfg.n + 1)}


# --- isolation ----------------------------------------------------------------

def attack_isolation(cfg: RunConfig, target: int, colluders: Iterable[int] = (), *,
                     support: Iterable[int] | None = None,
                     announce_t_g: int | None = None) -> AttackReport:
    """Aggregate the target together with colluders only, then subtract the colluders.

    ``support`` overrides the crafted round support (default: target plus
    colluders); every round of the crafted matrix uses it.
    """
    colluders = sorted(set(colluders) - {target})
    kind = ISOLATION_WITH_COLLUSION if colluders else ISOLATION_NO_COLLUSION
    sup = set(support) if support is not None else {target, *colluders}
    crafted = _matrix_from_supports([sup] * cfg.m, cfg)
    fed = _federation(cfg, {"crafted": crafted, "announce_t_g": announce_t_g}, colluders=colluders)
    honest = set(range(1, cfg.n + 1)) - set(colluders)
    evidence = {"support": sorted(sup), "colluders": colluders, "t_g": cfg.trust.t_g}
    try:
        fed.setup_keys()
        try:
            fed.negotiate()
        except InspectionBlocked as exc:
            evidence["verdicts"] = _verdict_kinds(exc.verdicts, honest)
            evidence["trace"] = _trace_excerpt(fed)
            return AttackReport(kind, BLOCKED_BY_INSPECTION, evidence)
        agg = fed.aggregator.run_round(fed.transport, 1, fed.global_model)
        row = crafted.rows[0]
        w_t = float(row[target - 1])
        if w_t == 0:
            evidence["reason"] = "target not enrolled"
            return AttackReport(kind, NO_EXPOSURE, evidence)
        others = [j for j in sup if j != target]
        if any(j not in colluders for j in others):
            evidence["reason"] = "honest parties share the aggregate with the target"
            return AttackReport(kind, NO_EXPOSURE, evidence)
        revealed = sum((float(row[j - 1]) * _quantized(cfg, fed.parties[j].last_plain_update) for j in others),
                       np.zeros_like(agg))
        estimate = (agg - revealed) / w_t
        truth = _quantized(cfg, fed.parties[target].last_plain_update)
        err = float(np.max(np.abs(estimate - truth)))
        tol = len(sup) * 10.0 ** -cfg.precision / w_t
        evidence["max_abs_error"] = err
        evidence["trace"] = _trace_excerpt(fed)
        return AttackReport(kind, SUCCEEDED if err <= tol else NO_EXPOSURE, evidence)
    finally:
        fed.close()


def isolation_boundary(cfg: RunConfig, target: int = 1) -> dict:
    """Smallest colluder count that lets isolation succeed, scanned empirically."""
    pool = [j for j in range(1, cfg.n + 1) if j != target]
    outcomes = {}
    boundary = None
    for c in range(len(pool) + 1):
        rep = attack_isolation(cfg, target, pool[:c])
        outcomes[c] = rep.outcome
        if rep.outcome == SUCCEEDED and boundary is None:
            boundary = c
    return {"t_g": cfg.trust.t_g, "outcomes": outcomes, "min_colluders_for_success": boundary}


# --- disaggregation -----------------------------------------------------------

def attack_disaggregation(cfg: RunConfig, crafted: ParticipationMatrix | Sequence[Iterable[int]], *,
                          bypass_inspection: bool = False) -> AttackReport:
    """Solve the multi-round aggregates for individual updates.

    Parties hold static updates across rounds (the setting in which a
    participation-matrix side channel is most useful to the attacker).
    ``bypass_inspection`` makes every party accept the crafted matrix; it is
    the control that shows the attack works when inspection is off.
    """
    if not isinstance(crafted, ParticipationMatrix):
        crafted = _matrix_from_supports(crafted, cfg)
    cfg = cfg.replace(m=crafted.m)
    colluders = range(1, cfg.n + 1) if bypass_inspection else ()
    fed = _federation(cfg, {"crafted": crafted}, colluders=colluders)
    dim = fed.global_model.size
    statics = _static_updates(cfg, dim)
    for p in fed.parties.values():
        p.update_override = lambda i, j, model: statics[j]
    evidence = {"rows": [sorted(crafted.support(i)) for i in range(crafted.m)],
                "bypass_inspection": bypass_inspection}
    try:
        fed.setup_keys()
        try:
            fed.negotiate()
        except InspectionBlocked as exc:
            evidence["verdicts"] = _verdict_kinds(exc.verdicts, set(range(1, cfg.n + 1)))
            evidence["trace"] = _trace_excerpt(fed)
            return AttackReport(DISAGGREGATION, BLOCKED_BY_INSPECTION, evidence)
        aggregates = np.stack([fed.aggregator.run_round(fed.transport, i, fed.global_model)
                               for i in range(1, crafted.m + 1)])
        exposed = disaggregation_rank_test(crafted)
        evidence["rank_test_exposed"] = exposed
        W = np.array([[float(w) for w in r] for r in crafted.rows])
        recovered = []
        for j in exposed:
            e = np.zeros(cfg.n)
            e[j - 1] = 1.0
            c, *_ = np.linalg.lstsq(W.T, e, rcond=None)
            estimate = c @ aggregates
            truth = _quantized(cfg, statics[j])
            tol = (np.abs(c).sum() + 1) * 10.0 ** -cfg.precision
            if np.max(np.abs(estimate - truth)) <= tol:
                recovered.append(j)
        evidence["recovered"] = recovered
        evidence["trace"] = _trace_excerpt(fed)
        return AttackReport(DISAGGREGATION, SUCCEEDED if recovered else NO_EXPOSURE, evidence)
    finally:
        fed.close()


# --- replay -------------------------------------------------------------------

def _relabel(ct: dmcfe.Ciphertext, label: bytes) -> dmcfe.Ciphertext:
    return dataclasses.replace(ct, label=label)


def attack_replay(cfg: RunConfig, i1: int, i2: int, replayed_parties: Iterable[int], *,
                  support: Iterable[int] | None = None) -> AttackReport:
    """Substitute round-``i1`` ciphertexts into round ``i2``'s decryption.

    The attacker rewrites the label field so the stale ciphertexts pass the
    label-consistency check; the group elements stay bound to round ``i1``.
    Both rounds (and all others) use the same valid support, default all
    parties but the last two.
    """
    if not 1 <= i1 < i2:
        raise ValueError("need 1 <= i1 < i2")
    replayed = sorted(set(replayed_parties))
    cfg = cfg.replace(m=max(cfg.m, i2))
    sup = set(support) if support is not None else set(range(1, max(cfg.n - 2, cfg.trust.t_g) + 1))
    crafted = _matrix_from_supports([sup] * cfg.m, cfg)
    stash: dict[int, dmcfe.Ciphertext] = {}

    def tamper(round_index, cts):
        if round_index == i1:
            stash.update({ct.party_id: ct for ct in cts})
        if round_index == i2:
            label = dmcfe.round_label(i2, fed.session)
            return [_relabel(stash[ct.party_id], label) if ct.party_id in replayed else ct for ct in cts]
        return cts

    fed = _federation(cfg, {"crafted": crafted, "tamper": tamper})
    evidence = {"i1": i1, "i2": i2, "replayed": replayed, "support": sorted(sup)}
    try:
        fed.setup_keys()
        fed.negotiate()
        model = fed.global_model
        for i in range(1, i2 + 1):
            try:
                model = fed.aggregator.run_round(fed.transport, i, model)
            except DecryptionFailure as exc:
                if i == i2 and isinstance(exc.__cause__, DlogNotFound):
                    evidence["error"] = "DlogNotFound"
                    evidence["detail"] = str(exc)
                    return AttackReport(REPLAY, BLOCKED_BY_LABEL, evidence)
                raise
        evidence["decrypted"] = True
        if not replayed:
            return AttackReport(REPLAY, NO_EXPOSURE, evidence)
        # a decryption mixing rounds would let the attacker cancel the fresh updates
        return AttackReport(REPLAY, SUCCEEDED, evidence)
    finally:
        fed.close()


def replay_trials(trials: int = 100, *, n: int = 6, t_g: int = 3, seed: int = 0) -> list[AttackReport]:
    return [attack_replay(attack_config(n, t_g, m=2, seed=seed + k), 1, 2, [2, 3, 4])
            for k in range(trials)]


# --- two-faced matrix -----------------------------------------------------------

def attack_two_faced_matrix(cfg: RunConfig, target: int, *, manipulated_column: int | None = None,
                            consistent: bool = False) -> AttackReport:
    """Show the target a matrix that enrolls it while everyone else sees one that drops a column.

    Each party inspects only its own view, so every party accepts. Fragments
    then carry two different fusion tags. The attacker first combines them
    as-is, then forges the tag field to force combination, and tries to
    decrypt under either weight vector. ``consistent=True`` is the control.
    """
    col = target if manipulated_column is None else manipulated_column
    full = [set(range(1, cfg.n + 1))] * cfg.m
    v_valid = _matrix_from_supports(full, cfg)
    v_manip = renormalize(v_valid.with_column(col, [0] * cfg.m))
    views = None if consistent else {j: (v_valid if j == target else v_manip) for j in range(1, cfg.n + 1)}
    crafted = v_manip if not consistent else v_valid
    fed = _federation(cfg, {"crafted": crafted, "views": views})
    evidence = {"target": target, "manipulated_column": col, "consistent": consistent}
    try:
        fed.setup_keys()
        try:
            fed.negotiate()
        except InspectionBlocked as exc:
            evidence["verdicts"] = _verdict_kinds(exc.verdicts, set(range(1, cfg.n + 1)))
            return AttackReport(TWO_FACED, BLOCKED_BY_INSPECTION, evidence)
        agg = fed.aggregator
        # query with the enrolling view so the target's ciphertext is collected too
        agg.matrix = v_valid
        replies = agg.query(fed.transport, 1, fed.global_model)
        cts = {j: dmcfe.Ciphertext.from_json(r["ciphertext"]) for j, r in replies.items()}
        frags = agg.fragments.row(0)
        tags = {f.fusion_tag for f in frags}
        evidence["distinct_tags"] = len(tags)
        label = dmcfe.round_label(1, fed.session)
        try:
            dk = dmcfe.key_der_comb(agg.pp, frags)
            evidence["combined"] = "as-is"
        except MixedFusionTag as exc:
            evidence["honest_combination"] = f"MixedFusionTag: {exc}"
            # forge: stamp every fragment with one tag and combine anyway
            forged_tag = next(f.fusion_tag for f in frags if f.party_id != target)
            frags = [dataclasses.replace(f, fusion_tag=forged_tag) for f in frags]
            dk = dmcfe.key_der_comb(agg.pp, frags)
            evidence["combined"] = "forged tags"
        attempts = {}
        for name, matrix in (("valid", v_valid), ("manipulated", v_manip)):
            y = [int(w != 0) for w in matrix.rows[0]]
            chosen = [cts[j] for j in sorted(cts) if y[j - 1]]
            try:
                values = dmcfe.decrypt(agg.pp, dk, chosen, y, label)
                attempts[name] = "decrypted"
                evidence[f"{name}_aggregate_head"] = decode(cfg.encoding, values[:3], sum(y)).tolist()
            except DlogNotFound:
                attempts[name] = "DlogNotFound"
            except DetrustError as exc:
                attempts[name] = type(exc).__name__
        evidence["decrypt_attempts"] = attempts
        if consistent:
            ok = attempts.get("valid") == "decrypted"
            evidence["control_decrypted"] = ok
            return AttackReport(TWO_FACED, NO_EXPOSURE, evidence)
        if "decrypted" in attempts.values():
            return AttackReport(TWO_FACED, SUCCEEDED, evidence)
        return AttackReport(TWO_FACED, BLOCKED_BY_KEY_BINDING, evidence)
    finally:
        fed.close()


def report_json(report: AttackReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True, default=str)
