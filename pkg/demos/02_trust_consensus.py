#!/usr/bin/env python3
"""Agreeing on who trains when, before any model leaves a party.

Five parties state how many peers they want to hide among. The aggregator
proposes a participation matrix, every party inspects it, and only once all
of them accept does each party issue its key fragments. A matrix that would
isolate someone, or let rounds be subtracted from each other, never gets
that far.

Usage: python demos/02_trust_consensus.py
"""
from __future__ import annotations

from fractions import Fraction

from detrust_fl import dmcfe
from detrust_fl.dtc import ConsensusAggregator, DtcParty, ExpectationPolicy, run_consensus
from detrust_fl.group import setup_group
from detrust_fl.participation import (
    ParticipationMatrix,
    TrustConfig,
    batch_classes,
    check_bp,
    disaggregation_rank_test,
    party_inspect,
)


def show(matrix: ParticipationMatrix) -> None:
    for i, row in enumerate(matrix.rows, start=1):
        cells = " ".join(f"{str(w):>4}" if w else "   ." for w in row)
        print(f"  round {i:2d}: {cells}")


def main() -> None:
    n, m = 5, 6
    t_local = {1: 2, 2: 3, 3: 2, 4: 2, 5: 3}
    group = setup_group(64, seed=3, allow_insecure=True)
    pp = dmcfe.setup(64, n, 1000, 1, group=group)
    keys = dmcfe.keygen_ceremony(pp, dmcfe.seeded_rng("consensus-demo", 0))
    parties = [DtcParty(k.party_id, pp, k, t_local[k.party_id]) for k in keys]
    # party 4 insists on joining every round
    parties[3].policy = ExpectationPolicy("every-round")

    agg = ConsensusAggregator(n, m, t_bp=2, seed=1)
    matrix, fragments = run_consensus(agg, parties)
    print(f"t_g = max of local thresholds = {agg.state.t_g}")
    print(f"agreed after {agg.state.negotiation_round} negotiation round(s), phases {[p.value for p in agg.state.history]}")
    show(matrix)
    print(f"batches: {sorted(sorted(c) for c in batch_classes(matrix))}")
    print(f"fragment table complete: {fragments.complete} ({m} rounds x {n} parties)")

    trust = TrustConfig(t_local, 2)
    print("\nhow parties react to hostile proposals:")
    isolating = ParticipationMatrix((
        (Fraction(1), Fraction(0), Fraction(0), Fraction(0), Fraction(0)),
    ))
    print(f"  isolate party 1          -> {party_inspect(isolating, 1, trust, isolating.column(1)).kind}")
    subtractable = ParticipationMatrix.from_supports([{1, 2, 3, 4}, {1, 2, 3}], n)
    print(f"  rounds {{1,2,3,4}},{{1,2,3}} -> {party_inspect(subtractable, 1, trust, subtractable.column(1)).kind}"
          f" (rank test exposes {disaggregation_rank_test(subtractable)})")
    print(f"  agreed matrix BP-valid   -> {check_bp(matrix, 2)}, exposes {disaggregation_rank_test(matrix)}")


if __name__ == "__main__":
    main()
