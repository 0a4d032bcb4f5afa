#!/usr/bin/env python3
"""Three parties, one aggregator, one weighted sum.

Walks through the cryptographic core on a small test group:

1. public parameters and per-party keys (Diffie-Hellman ceremony),
2. each party encrypts its vector under a round label,
3. each party hands out a key fragment bound to the agreed weights,
4. the aggregator combines the fragments and decrypts only the weighted sum,
5. the same fragments are useless for any other weight vector or round.

Usage: python demos/01_inner_product_encryption.py
"""
from __future__ import annotations

from detrust_fl import dmcfe
from detrust_fl.errors import DlogNotFound, LabelMismatch, MixedFusionTag
from detrust_fl.group import setup_group


def main() -> None:
    group = setup_group(128, seed=7, allow_insecure=True)
    pp = dmcfe.setup(128, 3, payload_bound=1000, max_weight_scale=10, group=group)
    print(f"group: {group.bits}-bit safe prime, dlog window +/-{pp.dlog_bound}")

    keys = dmcfe.keygen_ceremony(pp, dmcfe.seeded_rng("demo", 1), mode="dh")
    print(f"pairwise seeds agree: {keys[0].pairwise_seeds[2] == keys[1].pairwise_seeds[1]}")

    updates = {1: [12, -7, 300], 2: [5, 5, 5], 3: [-40, 0, 999]}
    weights = [2, 1, 3]
    label = dmcfe.round_label(1, b"demo")
    cts = [dmcfe.encrypt(pp, k, updates[k.party_id], label) for k in keys]
    print("ciphertext coordinate (party 1):", str(cts[0].coords[0])[:24] + "...")

    tag = dmcfe.make_fusion_tag(1, weights, b"demo")
    fragments = [dmcfe.key_der_share(pp, k, weights, tag) for k in keys]
    dk = dmcfe.key_der_comb(pp, fragments)
    result = dmcfe.decrypt(pp, dk, cts, weights, label)
    expected = [sum(w * updates[j][i] for j, w in zip((1, 2, 3), weights)) for i in range(3)]
    print(f"decrypted {result}, plain weighted sum {expected}")

    print("\nwhat the aggregator cannot do with the same material:")
    try:
        dmcfe.decrypt(pp, dk, cts[:1], [1, 0, 0], label)
    except DlogNotFound:
        print("  pick out party 1 alone        -> DlogNotFound")
    try:
        dmcfe.decrypt(pp, dk, cts, [1, 1, 1], label)
    except DlogNotFound:
        print("  decrypt under other weights   -> DlogNotFound")
    stale = [dmcfe.encrypt(pp, k, updates[k.party_id], dmcfe.round_label(2, b"demo")) for k in keys]
    try:
        dmcfe.decrypt(pp, dk, stale, weights, label)
    except LabelMismatch:
        print("  reuse another round's inputs  -> LabelMismatch")
    other = dmcfe.key_der_share(pp, keys[2], weights, dmcfe.make_fusion_tag(2, weights, b"demo"))
    try:
        dmcfe.key_der_comb(pp, fragments[:2] + [other])
    except MixedFusionTag:
        print("  mix fragments from two rounds -> MixedFusionTag")


if __name__ == "__main__":
    main()
