from fractions import Fraction

import pytest

from conftest import make_keys
from detrust_fl import dmcfe
from detrust_fl.dtc import (
    ConsensusAggregator,
    DtcAggregatorState,
    DtcParty,
    ExpectationPolicy,
    KeyFragmentMatrix,
    Phase,
    aggregator_merge_suggestions,
    direct_exchange,
    generate_fragments,
    row_fusion_tag,
    run_consensus,
)
from detrust_fl.encoding import EncodingConfig
from detrust_fl.errors import (
    ConsensusTimeout,
    InfeasibleConstraints,
    PartyRefusal,
    PreconditionError,
    RefusedMatrix,
)
from detrust_fl.participation import (
    ACCEPT,
    SUGGEST,
    InspectionVerdict,
    ParticipationMatrix,
    TrustConfig,
    check_bp,
    propose_matrix,
    rows_meet_threshold,
)


def federation(group, n, t_local, policies=None):
    pp = dmcfe.setup(64, n, 100, 1, group=group)
    keys = make_keys(pp, seed=n)
    if isinstance(t_local, int):
        t_local = {j: t_local for j in range(1, n + 1)}
    parties = [DtcParty(k.party_id, pp, k, t_local[k.party_id], policy=(policies or {}).get(k.party_id))
               for k in keys]
    return pp, keys, parties


def test_honest_consensus_converges_in_one_round(group64):
    pp, keys, parties = federation(group64, 5, 3)
    agg = ConsensusAggregator(5, 4, seed=1)
    matrix, frags = run_consensus(agg, parties)
    assert agg.state.negotiation_round == 1
    assert agg.state.phase == Phase.DONE
    assert check_bp(matrix, 2) and rows_meet_threshold(matrix, 3)
    assert frags.complete and len(frags.table) == 4 and all(len(r) == 5 for r in frags.table)


def test_every_fragment_row_combines_and_decrypts(group64):
    pp, keys, parties = federation(group64, 4, 2)
    agg = ConsensusAggregator(4, 3, seed=2)
    matrix, frags = run_consensus(agg, parties)
    cfg = EncodingConfig()
    for i in range(matrix.m):
        y, tag = row_fusion_tag(matrix, i, cfg)
        dk = dmcfe.key_der_comb(pp, frags.row(i))
        assert dk.fusion_tag == tag
        label = dmcfe.round_label(i + 1)
        cts = [dmcfe.encrypt(pp, k, [k.party_id], label) for k in keys if y[k.party_id - 1]]
        assert dmcfe.decrypt(pp, dk, cts, y, label) == [sum(k.party_id for k in keys if y[k.party_id - 1])]


def test_global_threshold_is_the_max(group64):
    pp, keys, parties = federation(group64, 4, {1: 2, 2: 2, 3: 2, 4: 4})
    agg = ConsensusAggregator(4, 3)
    matrix, _ = run_consensus(agg, parties)
    assert agg.state.t_g == 4
    assert all(matrix.support(i) == {1, 2, 3, 4} for i in range(3))


def test_unsatisfiable_threshold_aborts(group64):
    pp, keys, parties = federation(group64, 3, {1: 2, 2: 2, 3: 2})
    agg = ConsensusAggregator(3, 2, t_bp=4)
    with pytest.raises(InfeasibleConstraints):
        run_consensus(agg, parties)
    assert agg.state.phase == Phase.ABORTED


def test_suggestion_is_spliced_when_valid(group64):
    pp, keys, parties = federation(group64, 4, 2)
    # party 3 wants every round at its fair share
    parties[2].policy = ExpectationPolicy("every-round")
    agg = ConsensusAggregator(4, 3, seed=5)
    matrix, _ = run_consensus(agg, parties)
    assert all(3 in matrix.support(i) for i in range(3))


def test_incompatible_suggestion_leads_to_refusal(group64):
    pp, keys, parties = federation(group64, 4, 2)
    # party 1 insists on participating alone in round 1, which can never satisfy BP
    parties[0].policy = ExpectationPolicy("fixed", (Fraction(1), Fraction(0)))
    agg = ConsensusAggregator(4, 2, seed=0)
    with pytest.raises(PartyRefusal) as exc:
        run_consensus(agg, parties)
    assert exc.value.parties == [1]
    assert agg.state.phase == Phase.ABORTED


def test_negotiation_round_limit(group64):
    class Stubborn(ConsensusAggregator):
        def propose(self, exchange, proposal):
            verdicts = super().propose(exchange, proposal)
            # pretend every proposal drew a fresh, different suggestion
            col = tuple(Fraction(self.state.negotiation_round, 1000) for _ in range(self.m))
            return {**verdicts, 1: InspectionVerdict(SUGGEST, col)}

    pp, keys, parties = federation(group64, 4, 2)
    agg = Stubborn(4, 2, max_negotiation_rounds=3)
    with pytest.raises(ConsensusTimeout):
        run_consensus(agg, parties)
    assert agg.state.negotiation_round == 3


def test_merge_all_accept_is_fixed_point():
    trust = TrustConfig.uniform(4, 2)
    prop = propose_matrix(3, 4, trust, rng_seed=3)
    verdicts = {j: InspectionVerdict(ACCEPT) for j in range(1, 5)}
    assert aggregator_merge_suggestions(prop, verdicts, trust) == (prop, set())


def test_merge_zeroes_bp_breaking_column_and_repairs():
    trust = TrustConfig.uniform(6, 2)
    prop = ParticipationMatrix.from_supports([{1, 2, 3, 4, 5, 6}] * 2, 6)
    bad = InspectionVerdict(SUGGEST, (Fraction(1, 6), Fraction(0)))
    new, rejected = aggregator_merge_suggestions(prop, {1: bad}, trust)
    assert rejected == {1}
    assert new.column(1) == (0, 0)
    assert check_bp(new, 2) and rows_meet_threshold(new, 2)


def test_fragments_require_acceptance(group64):
    pp, keys, parties = federation(group64, 3, 2)
    m = ParticipationMatrix.from_supports([{1, 2, 3}] * 2, 3)
    with pytest.raises(RefusedMatrix):
        generate_fragments(parties[0], m)
    assert parties[0].inspect(m, 2, 2).kind == ACCEPT
    frags = generate_fragments(parties[0], m)
    assert len(frags) == 2
    assert frags[0].d != frags[1].d  # identical rows, different rounds
    tweaked = m.with_column(3, [Fraction(1, 3), Fraction(1, 2)])
    with pytest.raises(RefusedMatrix):
        generate_fragments(parties[0], tweaked)


def test_twenty_rounds_twenty_fragments(group64):
    pp, keys, parties = federation(group64, 3, 2)
    m = ParticipationMatrix.from_supports([{1, 2, 3}] * 20, 3)
    parties[1].inspect(m, 2, 2)
    frags = generate_fragments(parties[1], m)
    assert [f.fusion_tag for f in frags] == [row_fusion_tag(m, i, EncodingConfig())[1] for i in range(20)]


def test_state_machine_rejects_illegal_transition():
    st = DtcAggregatorState()
    with pytest.raises(PreconditionError):
        st.advance(Phase.DONE)
    st.advance(Phase.PROPOSING)
    st.advance(Phase.AWAIT_VERDICTS)
    st.advance(Phase.PROPOSING)
    assert st.history[-1] == Phase.PROPOSING


def test_key_fragment_matrix_checks_columns(group64):
    pp, keys, _ = federation(group64, 3, 2)
    kfm = KeyFragmentMatrix(2, 3)
    frag = dmcfe.key_der_share(pp, keys[0], [1, 1, 1], b"t")
    with pytest.raises(PreconditionError):
        kfm.fill_column(1, [frag])
    with pytest.raises(PreconditionError):
        kfm.fill_column(2, [frag, frag])
    assert not kfm.complete


def test_abort_reply_when_party_never_accepted(group64):
    pp, keys, parties = federation(group64, 3, 2)
    exchange = direct_exchange({p.party_id: p for p in parties})
    m = ParticipationMatrix.from_supports([{1, 2, 3}], 3)
    kind, payload = exchange(1, "DTC_KEYFRAGS", {"matrix": m.to_json()})
    assert kind == "ABORT" and "never accepted" in payload["reason"]
