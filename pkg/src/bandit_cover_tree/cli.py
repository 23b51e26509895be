"""Command-line entry point: ``bct <subcommand> ...``.

Every subcommand prints one JSON object on stdout. Point files are CSV or NDJSON,
trees and reports are NDJSON.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import harness
from .covertree import (
    CoverTree,
    CoverTreeError,
    SearchConfig,
    build,
    check_invariants,
    find_nearest,
    insert,
    remove,
)
from .nngraph import build_nn_graph
from .oracle import ContractError, PointSet, StochasticOracle, distance_matrix, load_points, save_csv, save_ndjson
from .report import RunReport


def _oracle_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--oracle", choices=["exact", "gaussian", "subsample"], default="gaussian")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--subsample-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--t-max", type=int, default=1_000_000)
    p.add_argument("--timing", action="store_true", help="include wall-clock time in reports")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bct", description="Cover trees driven by a noisy distance oracle.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic point set")
    p.add_argument("--kind", choices=harness.GENERATORS, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("build", help="build a cover tree over every point of --input")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="tree file")
    _oracle_flags(p)

    p = sub.add_parser("query", help="nearest neighbour of one or more query vectors")
    p.add_argument("--input", required=True)
    p.add_argument("--tree", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--query", help="comma-separated coordinates")
    g.add_argument("--queries", help="CSV or NDJSON file of query vectors")
    p.add_argument("--epsilon", type=float, default=None, help="return a (1+epsilon)-approximate neighbour")
    p.add_argument("--expansion-bound", type=float, default=None)
    p.add_argument("--lt-variant", action="store_true")
    p.add_argument("--trace", action="store_true", help="include per-level call counts")
    p.add_argument("--out", default=None, help="NDJSON results; stdout when omitted")
    _oracle_flags(p)

    for name, what in (("insert", "add a point of --input to the tree"), ("remove", "delete a point from the tree")):
        p = sub.add_parser(name, help=what)
        p.add_argument("--input", required=True)
        p.add_argument("--tree", required=True)
        p.add_argument("--index", type=int, required=True, action="append")
        p.add_argument("--out", required=True, help="updated tree file")
        _oracle_flags(p)

    p = sub.add_parser("nn-graph", help="nearest-neighbour graph of --input")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help=".csv or .ndjson edge list")
    p.add_argument("--lt-variant", action="store_true")
    _oracle_flags(p)

    p = sub.add_parser("check", help="verify tree invariants with exact distances")
    p.add_argument("--input", required=True)
    p.add_argument("--tree", required=True)
    p.add_argument("--metric", choices=["euclidean", "sqeuclidean"], default="euclidean")

    p = sub.add_parser("expansion", help="brute-force expansion constant of --input")
    p.add_argument("--input", required=True)
    p.add_argument("--metric", choices=["euclidean", "sqeuclidean"], default="euclidean")

    p = sub.add_parser("bench", help="run a seeded experiment")
    p.add_argument("--config", default=None, help="JSON experiment description; flags override it")
    p.add_argument("--operation", choices=harness.OPERATIONS, default=None)
    p.add_argument("--generator", choices=harness.GENERATORS, default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--n", type=int, nargs="+", default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--queries-per-trial", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--expansion-bound", type=float, default=None)
    p.add_argument("--lt-variant", action="store_true", default=None)
    p.add_argument("--paired-exact", action="store_true", default=None)
    p.add_argument("--nested", action="store_true", default=None, help="sweep n over prefixes of one draw")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--oracle", choices=["exact", "gaussian", "subsample"], default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--subsample-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--t-max", type=int, default=None)
    p.add_argument("--timing", action="store_true")
    return ap


def _params(items: List[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--param expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _make_oracle(args, points: PointSet) -> StochasticOracle:
    return StochasticOracle(points, args.oracle, args.sigma, args.subsample_len, args.seed)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _cmd_gen_data(args) -> int:
    pts = harness.generate_dataset(args.kind, args.n, args.dim, _params(args.param), args.seed)
    out = Path(args.out)
    (save_csv if out.suffix == ".csv" else save_ndjson)(pts, out)
    _emit({"out": str(out), "n": pts.n, "dim": pts.dim})
    return 0


def _cmd_build(args) -> int:
    pts = load_points(args.input)
    oracle = _make_oracle(args, pts)
    tree, report = build(pts.n, args.delta, oracle, t_max=args.t_max)
    tree.save(args.out)
    report.seed = args.seed
    _emit(report.to_dict(args.timing))
    return 0


def _cmd_query(args) -> int:
    pts = load_points(args.input)
    tree = CoverTree.load(args.tree)
    if args.query is not None:
        queries = np.array([[float(v) for v in args.query.split(",")]])
    else:
        queries = load_points(args.queries).points
    if queries.shape[1] != pts.dim:
        raise ContractError(f"query dimension {queries.shape[1]} does not match data dimension {pts.dim}")
    config = SearchConfig(args.delta, args.expansion_bound, args.epsilon, args.lt_variant, args.t_max)
    lines = []
    for k, qv in enumerate(queries):
        seed = harness.derive_seed(args.seed, k)
        oracle = StochasticOracle(pts, args.oracle, args.sigma, args.subsample_len, seed)
        qi = oracle.add_point(qv)
        res = find_nearest(tree, qi, config, oracle)
        res.report.seed = seed
        rec = res.report.to_dict(args.timing)
        if not args.trace:
            rec.pop("per_level_calls")
        rec.update({"query": k, "nn": res.nn})
        lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_edit(args) -> int:
    pts = load_points(args.input)
    tree = CoverTree.load(args.tree)
    oracle = _make_oracle(args, pts)
    report = RunReport(seed=args.seed, config={"delta": args.delta, "t_max": args.t_max, "indices": args.index})
    op = insert if args.command == "insert" else remove
    per = args.delta / len(args.index)
    for p in args.index:
        if not 0 <= p < pts.n:
            raise ContractError(f"index {p} is not a row of {args.input}")
        op(tree, p, per, oracle, t_max=args.t_max, report=report)
    report.total_oracle_calls = oracle.call_count
    tree.save(args.out)
    _emit(report.to_dict(args.timing))
    return 0


def _cmd_nn_graph(args) -> int:
    pts = load_points(args.input)
    oracle = _make_oracle(args, pts)
    res = build_nn_graph(pts.n, args.delta, oracle, t_max=args.t_max, lt_variant=args.lt_variant)
    res.graph.save(args.out)
    res.report.seed = args.seed
    _emit(res.report.to_dict(args.timing))
    return 0


def _cmd_check(args) -> int:
    pts = load_points(args.input)
    tree = CoverTree.load(args.tree)
    result = check_invariants(tree, distance_matrix(pts, args.metric))
    _emit(result)
    return 0 if result["ok"] else 1


def _cmd_expansion(args) -> int:
    pts = load_points(args.input)
    _emit({"n": pts.n, "expansion_constant": harness.estimate_expansion_constant(pts, args.metric)})
    return 0


def _cmd_bench(args) -> int:
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    overrides = {
        "operation": args.operation,
        "generator": args.generator,
        "input": args.input,
        "n": (args.n[0] if args.n and len(args.n) == 1 else args.n),
        "dim": args.dim,
        "trials": args.trials,
        "queries_per_trial": args.queries_per_trial,
        "epsilon": args.epsilon,
        "expansion_bound": args.expansion_bound,
        "lt_variant": args.lt_variant,
        "paired_exact": args.paired_exact,
        "nested": args.nested,
        "workers": args.workers,
        "oracle": args.oracle,
        "sigma": args.sigma,
        "subsample_len": args.subsample_len,
        "seed": args.seed,
        "delta": args.delta,
        "t_max": args.t_max,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.param:
        cfg["params"] = {**cfg.get("params", {}), **_params(args.param)}
    cfg["out"] = args.out
    spec = harness.ExperimentSpec.from_dict(cfg)
    result = harness.run_experiment(spec, include_timing=args.timing)
    _emit(result.summary)
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "build": _cmd_build,
    "query": _cmd_query,
    "insert": _cmd_edit,
    "remove": _cmd_edit,
    "nn-graph": _cmd_nn_graph,
    "check": _cmd_check,
    "expansion": _cmd_expansion,
    "bench": _cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError, CoverTreeError) as exc:
        sys.stderr.write(f"bct {args.command}: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
