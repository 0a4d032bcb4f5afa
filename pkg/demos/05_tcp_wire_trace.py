#!/usr/bin/env python3
"""The same federation over real sockets, and what goes over the wire.

Every entity gets its own JSON-lines server on localhost. After a short run
the message log is printed by type, followed by one training reply, which
carries a ciphertext and nothing else.

Usage: python demos/05_tcp_wire_trace.py [--trace-out FILE]
"""
from __future__ import annotations

import argparse
import json
from collections import Counter

from detrust_fl.config import DatasetSpec, RunConfig
from detrust_fl.engine import run_training


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--trace-out", help="also write the full log as JSON lines")
    args = ap.parse_args()

    cfg = RunConfig(mode="tcp", m=3, n=4, t_local=2, lambda_bits=128, allow_insecure=True,
                    dataset=DatasetSpec(n_samples=400, n_features=4, n_classes=2))
    res = run_training(cfg)
    print(f"accuracy per round: {[m['accuracy'] for m in res.metrics]}")
    print(f"interactions: {res.meter['interactions']}")

    envelopes = [json.loads(line) for line in res.trace]
    counts = Counter((e["type"], e["from"][0], e["to"][0]) for e in envelopes)
    print("\nmessages by type (sender kind -> receiver kind):")
    for (kind, src, dst), c in sorted(counts.items()):
        print(f"  {kind:<14} {src} -> {dst}  x{c}")

    reply = next(e for e in envelopes if e["type"] == "TRAIN_REPLY")
    coords = reply["payload"]["ciphertext"]["coords"]
    print(f"\none training reply from {reply['from']}: payload keys {sorted(reply['payload'])}, "
          f"{len(coords)} group elements, first {coords[0][:20]}...")
    if args.trace_out:
        with open(args.trace_out, "wb") as fh:
            fh.writelines(res.trace)
        print(f"trace written to {args.trace_out}")


if __name__ == "__main__":
    main()
