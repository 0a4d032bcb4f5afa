"""Command-line entry point: ``detrust-fl {run,sweep,attack,keygen-ceremony,validate-matrix}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

from . import adversary, dmcfe
from .config import RunConfig
from .errors import DetrustError
from .participation import (
    ParticipationMatrix,
    batch_classes,
    check_bp,
    disaggregation_rank_test,
    rows_meet_threshold,
)
from .transport import interaction_report

logger = logging.getLogger("detrust_fl")

METRIC_FIELDS = ("round", "accuracy", "loss", "bytes_tx", "interactions")


# --- config assembly -----------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--precision", type=int, help="decimal digits kept by the fixed-point encoding")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("sim", "tcp"))
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--rounds", "-m", type=int, dest="m")
    p.add_argument("--parties", "-n", type=int, dest="n")
    p.add_argument("--fusion", choices=("average", "weighted"))
    p.add_argument("--weights-from-samples", action="store_true", default=None,
                   help="weighted fusion with weights proportional to party sample counts")
    p.add_argument("--protocol", choices=("secure", "plaintext"))
    p.add_argument("--t-g", type=int, dest="t_local", help="uniform local trust threshold")
    p.add_argument("--t-bp", type=int)
    p.add_argument("--lambda", type=int, dest="lambda_bits", help="group size in bits")
    p.add_argument("--trace", action="store_true", help="write the full message log as trace.jsonl")


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in
                 ("precision", "seed", "mode", "m", "n", "fusion", "weights_from_samples", "protocol",
                  "t_local", "t_bp", "lambda_bits")
                 if getattr(args, k, None) is not None}
    if args.out is not None:
        overrides["out"] = str(args.out)
    cfg = cfg.replace(**overrides)
    if cfg.weights_from_samples:
        cfg = cfg.replace(fusion="weighted")
    return cfg.validate()


# --- outputs ---------------------------------------------------------------------

def _write_csv(path: Path, rows, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def write_outputs(result, out: Path, *, trace: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    _write_csv(out / "metrics.csv", result.metrics, METRIC_FIELDS)
    _write_csv(out / "timings.csv", result.timings, ("round", "wall_ms"))
    report = interaction_report(cfg.m, cfg.n, result.table_interactions)
    if cfg.protocol == "plaintext":
        report["matches_formula"] = result.table_interactions == report["formulas"]["General-FL"]
    report["meter"] = result.meter
    report["consensus_negotiation_rounds"] = result.consensus_rounds
    (out / "interactions.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "final_model.json").write_text(json.dumps({
        "values": result.final_model.tolist(),
        "final_accuracy": result.metrics[-1]["accuracy"] if result.metrics else None,
    }) + "\n")
    with open(out / "rounds.jsonl", "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    (out / "matrix.json").write_text(json.dumps(result.matrix.to_json()) + "\n")
    cfg.save(out / "config.json")
    if trace:
        (out / "trace.jsonl").write_bytes(b"".join(result.trace))


def _error(exc: Exception) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("missing", "parties", "line"):
        if getattr(exc, attr, None) is not None:
            val = getattr(exc, attr)
            payload[attr] = val.decode(errors="replace") if isinstance(val, bytes) else val
    print(json.dumps(payload), file=sys.stderr)
    return 2


# --- subcommands -----------------------------------------------------------------

def cmd_run(args) -> int:
    from .engine import run_training

    cfg = build_config(args)
    result = run_training(cfg, keep_trace=args.trace)
    out = Path(cfg.out or "detrust-run")
    write_outputs(result, out, trace=args.trace)
    last = result.metrics[-1]
    print(json.dumps({"out": str(out), "rounds": cfg.m, "accuracy": last["accuracy"],
                      "interactions": result.table_interactions}))
    return 0


def _sweep_one(cfg_json: dict, axis: str, value: int) -> dict:
    from .engine import run_training

    cfg = RunConfig.from_json(cfg_json)
    cfg = cfg.replace(**{("n" if axis == "parties" else "precision"): value})
    row = {"axis": axis, "value": value, "status": "ok", "accuracy": "", "loss": "",
           "wall_ms": "", "interactions": "", "error": ""}
    t0 = time.perf_counter()
    try:
        cfg.validate()
        result = run_training(cfg, keep_trace=False)
        if cfg.out:
            write_outputs(result, Path(cfg.out) / f"{axis}-{value}")
        row.update(accuracy=result.metrics[-1]["accuracy"], loss=result.metrics[-1]["loss"],
                   interactions=result.table_interactions,
                   wall_ms=round(sum(t["wall_ms"] for t in result.timings), 3))
    except Exception as exc:  # per-run failures are recorded; the sweep continues
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    row["total_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
    return row


def run_sweep(cfg: RunConfig, axis: str, values, *, parallel: bool = False) -> list[dict]:
    if not values:
        raise ValueError("sweep needs at least one value")
    cfg_json = cfg.to_json()
    if parallel:
        with ProcessPoolExecutor() as pool:
            return list(pool.map(_sweep_one, [cfg_json] * len(values), [axis] * len(values), values))
    return [_sweep_one(cfg_json, axis, v) for v in values]


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    rows = run_sweep(cfg, args.axis, args.values, parallel=args.parallel)
    out = Path(cfg.out or "detrust-sweep")
    out.mkdir(parents=True, exist_ok=True)
    fields = ("axis", "value", "status", "accuracy", "loss", "wall_ms", "total_ms", "interactions", "error")
    _write_csv(out / "summary.csv", rows, fields)
    cfg.save(out / "config.json")
    print(json.dumps({"out": str(out), "runs": len(rows),
                      "failed": sum(r["status"] != "ok" for r in rows)}))
    return 0


def _parse_ids(text: str | None) -> list[int]:
    if not text:
        return []
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _load_supports(text: str):
    path = Path(text)
    data = json.loads(path.read_text()) if path.exists() else json.loads(text)
    if isinstance(data, dict):
        return ParticipationMatrix.from_json(data)
    return data


def cmd_attack(args) -> int:
    cfg = adversary.attack_config(args.parties, args.t_g, m=args.rounds, seed=args.seed,
                                  t_bp=args.t_bp, lambda_bits=args.lambda_bits)
    colluders = _parse_ids(args.colluders)
    kind = args.kind
    if kind == "isolation":
        support = _parse_ids(args.support) or None
        report = adversary.attack_isolation(cfg, args.target, colluders, support=support)
    elif kind == "disaggregation":
        crafted = _load_supports(args.matrix) if args.matrix else [[args.target, *colluders], [args.target]]
        report = adversary.attack_disaggregation(cfg, crafted, bypass_inspection=args.bypass_inspection)
    elif kind == "replay":
        replayed = colluders or [args.target]
        report = adversary.attack_replay(cfg, args.i1, args.i2, replayed)
    else:
        report = adversary.attack_two_faced_matrix(cfg, args.target)
    text = adversary.report_json(report)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    print(text)
    return 0


def cmd_keygen(args) -> int:
    # the seed picks a small test group; production size always uses the fixed MODP group
    group_seed = args.seed if args.lambda_bits != 2048 else None
    pp = dmcfe.setup(args.lambda_bits, args.parties, args.payload_bound, args.max_weight_scale,
                     seed=group_seed)
    rng = dmcfe.seeded_rng("keygen", args.seed) if args.seed is not None else None
    keys = dmcfe.keygen_ceremony(pp, rng, mode=args.ceremony)
    symmetric = all(keys[i].pairwise_seeds[j + 1] == keys[j].pairwise_seeds[i + 1]
                    for i in range(pp.n) for j in range(pp.n) if i != j)
    summary = {"n": pp.n, "lambda": pp.group.bits, "dlog_bound": pp.dlog_bound,
               "mode": args.ceremony, "seeds_symmetric": symmetric}
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "pp.json").write_text(json.dumps(pp.to_json(), indent=2) + "\n")
        for k in keys:
            (args.out / f"party-{k.party_id}.json").write_text(json.dumps({
                "party": k.party_id, "s": [str(k.s[0]), str(k.s[1])],
                "pairwise_seeds": {str(j): s.hex() for j, s in sorted(k.pairwise_seeds.items())},
            }, indent=2) + "\n")
        summary["out"] = str(args.out)
    print(json.dumps(summary))
    return 0 if symmetric else 1


def cmd_validate_matrix(args) -> int:
    data = _load_supports(args.matrix)
    if isinstance(data, ParticipationMatrix):
        matrix = data
    elif args.weights:
        matrix = ParticipationMatrix(tuple(tuple(Fraction(str(w)) for w in r) for r in data))
    else:
        n = args.parties or max((j for row in data for j in row), default=0)
        matrix = ParticipationMatrix.from_supports([set(r) for r in data], n)
    bp = check_bp(matrix, args.t_bp)
    rows_ok = rows_meet_threshold(matrix, args.t_g)
    report = {
        "m": matrix.m, "n": matrix.n,
        "batch_partitioning": bp,
        "rows_meet_threshold": rows_ok,
        "classes": sorted(sorted(c) for c in batch_classes(matrix)),
        "exposed_by_rank_test": disaggregation_rank_test(matrix),
        "valid": bp and rows_ok,
    }
    print(json.dumps(report))
    return 0 if report["valid"] else 1


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detrust-fl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one federation")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one run per value of the party count or encoding precision")
    _add_run_flags(p)
    p.add_argument("--axis", choices=("parties", "precision"), required=True)
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.add_argument("--parallel", action="store_true", help="run the federations in separate processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack", help="run a malicious-aggregator attack and print the report")
    p.add_argument("--kind", choices=("isolation", "disaggregation", "replay", "two-faced"), required=True)
    p.add_argument("--target", type=int, default=1)
    p.add_argument("--colluders", help="comma-separated party ids")
    p.add_argument("--support", help="isolation: comma-separated round support")
    p.add_argument("--matrix", help="disaggregation: JSON list of round supports, or a path to one")
    p.add_argument("--bypass-inspection", action="store_true", help="disaggregation control run")
    p.add_argument("--i1", type=int, default=1)
    p.add_argument("--i2", type=int, default=2)
    p.add_argument("--parties", "-n", type=int, default=5)
    p.add_argument("--t-g", type=int, default=3)
    p.add_argument("--t-bp", type=int, default=2)
    p.add_argument("--rounds", "-m", type=int, default=2)
    p.add_argument("--lambda", type=int, dest="lambda_bits", default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the report JSON here")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("keygen-ceremony", help="set up public parameters and party keys")
    p.add_argument("--parties", "-n", type=int, default=5)
    p.add_argument("--lambda", type=int, dest="lambda_bits", default=2048)
    p.add_argument("--payload-bound", type=int, default=10**5)
    p.add_argument("--max-weight-scale", type=int, default=1)
    p.add_argument("--ceremony", choices=("dealer", "dh"), default="dh")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("validate-matrix", help="check a participation matrix")
    p.add_argument("--matrix", required=True, help="JSON matrix, list of round supports, or a path")
    p.add_argument("--weights", action="store_true",
                   help="rows are weight vectors (zero = not enrolled) instead of party-id lists")
    p.add_argument("--parties", "-n", type=int)
    p.add_argument("--t-g", type=int, default=3)
    p.add_argument("--t-bp", type=int, default=2)
    p.set_defaults(func=cmd_validate_matrix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "sweep" and not args.values:
        parser.error("--values needs at least one value")
    try:
        return args.func(args)
    except DetrustError as exc:
        return _error(exc)


if __name__ == "__main__":
    sys.exit(main())
