#!/usr/bin/env python3
"""A curious aggregator tries four ways to see one party's model.

Each attack runs against the real engine through a subclassed aggregator.
Next to every attack is a control run with the relevant defence switched
off or the manipulation removed, so a "blocked" result means the defence
did the work, not that the harness is broken.

Usage: python demos/04_malicious_aggregator.py [--json]
"""
from __future__ import annotations

import argparse
import json

from detrust_fl.adversary import (
    attack_config,
    attack_disaggregation,
    attack_isolation,
    attack_replay,
    attack_two_faced_matrix,
    isolation_boundary,
)


def line(name: str, rep) -> None:
    detail = {k: v for k, v in rep.evidence.items() if k in ("verdicts", "error", "decrypt_attempts", "recovered")}
    print(f"  {name:<42} {rep.outcome:<22} {json.dumps(detail)[:90]}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--json", action="store_true", help="dump the full reports")
    args = ap.parse_args()

    cfg = attack_config(5, 3)  # five parties, each wants to hide among at least three
    runs = {
        "isolate party 1 in a round of its own": attack_isolation(cfg, 1, support={1}),
        "isolate party 1 with one colluder": attack_isolation(cfg, 1, colluders={2}),
        "rounds {1,2,3,4} then {1,2,3}": attack_disaggregation(cfg, [{1, 2, 3, 4}, {1, 2, 3}]),
        "  control: same, inspection bypassed": attack_disaggregation(
            cfg, [{1, 2, 3, 4}, {1, 2, 3}], bypass_inspection=True),
        "replay round-1 ciphertexts in round 2": attack_replay(attack_config(6, 3, m=2), 1, 2, {2, 3, 4}),
        "  control: nothing replayed": attack_replay(attack_config(6, 3, m=2), 1, 2, set()),
        "show party 1 a different matrix": attack_two_faced_matrix(cfg, 1),
        "  control: consistent matrices": attack_two_faced_matrix(cfg, 1, consistent=True),
    }
    print("attack                                     outcome                evidence")
    for name, rep in runs.items():
        line(name, rep)

    bound = isolation_boundary(attack_config(7, 4), target=1)
    print(f"\nwith t_g = {bound['t_g']} of 7, colluders needed before isolation works: "
          f"{bound['min_colluders_for_success']}")
    print("  " + ", ".join(f"{c} colluders: {o}" for c, o in bound["outcomes"].items()))
    if args.json:
        print(json.dumps({k.strip(): v.to_json() for k, v in runs.items()}, indent=2, default=str))


if __name__ == "__main__":
    main()
