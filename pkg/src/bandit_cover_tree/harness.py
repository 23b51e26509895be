"""Datasets, brute-force ground truth and the seeded experiment runner.

This module is the only place exact distances are computed. The algorithms get an
oracle; the harness keeps coordinates so it can score what they return.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .covertree import (
    CoverTree,
    SearchConfig,
    build,
    check_invariants,
    find_nearest,
    insert,
    remove,
)
from .nngraph import NNGraph, build_nn_graph
from .oracle import (
    OracleConfig,
    PointSet,
    StochasticOracle,
    dissimilarities,
    dissimilarity,
    distance_matrix,
    load_points,
)
from .report import SCHEMA_VERSION, RunReport

GENERATORS = ("uniform-cube", "gaussian-mixture", "line", "two-clusters", "low-dim-subspace")
OPERATIONS = ("build", "query", "approx", "insert", "remove", "nngraph")


def derive_seed(root_seed: int, *keys: int) -> int:
    """Stable 63-bit seed for ``(root_seed, *keys)``, identical on every platform."""
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# datasets


def generate_dataset(
    kind: str, n: int, dim: int = 2, params: Optional[Dict[str, Any]] = None, seed: int = 0
) -> PointSet:
    """Deterministic synthetic point sets with pairwise-distinct points.

    ``uniform-cube``
        uniform in ``[0, side]^dim``; ``side`` defaults to ``10 * n**(1/dim)`` so the
        density does not change with ``n``.
    ``gaussian-mixture``
        ``k`` (8) isotropic clusters with standard deviation ``std`` (5) whose centres
        are uniform in ``[0, spread]^dim`` (100).
    ``line``
        ``i * spacing`` (1) along the first axis.
    ``two-clusters``
        half the points uniform in a ball of ``radius`` (0.1) at the origin, half in
        one at distance ``separation`` (100) along the first axis.
    ``low-dim-subspace``
        uniform in an ``intrinsic``-dimensional (2) cube of side ``side`` (default
        ``10 * n**(1/intrinsic)``), embedded by a random orthonormal map.
    """
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be at least 1")
    if kind not in GENERATORS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {GENERATORS}")
    p = dict(params or {})
    rng = np.random.default_rng(derive_seed(seed, GENERATORS.index(kind), n, dim))

    if kind == "line":
        pts = np.zeros((n, dim))
        pts[:, 0] = np.arange(n) * float(p.get("spacing", 1.0))
        return PointSet(pts)

    def draw(m: int) -> np.ndarray:
        if kind == "uniform-cube":
            side = float(p.get("side", 10.0 * n ** (1.0 / dim)))
            return rng.uniform(0.0, side, size=(m, dim))
        if kind == "gaussian-mixture":
            return centres[rng.integers(0, len(centres), size=m)] + rng.normal(
                0.0, float(p.get("std", 5.0)), size=(m, dim)
            )
        if kind == "two-clusters":
            radius = float(p.get("radius", 0.1))
            direction = rng.normal(size=(m, dim))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            r = radius * rng.uniform(0.0, 1.0, size=(m, 1)) ** (1.0 / dim)
            out = direction * r
            out[1::2, 0] += float(p.get("separation", 100.0))
            return out
        k = int(p.get("intrinsic", 2))
        side = float(p.get("side", 10.0 * n ** (1.0 / k)))
        return rng.uniform(0.0, side, size=(m, k)) @ basis

    if kind == "gaussian-mixture":
        k = int(p.get("k", 8))
        centres = rng.uniform(0.0, float(p.get("spread", 100.0)), size=(k, dim))
    if kind == "low-dim-subspace":
        k = int(p.get("intrinsic", 2))
        if k > dim:
            raise ValueError("intrinsic dimension exceeds the ambient dimension")
        basis = np.linalg.qr(rng.normal(size=(dim, k)))[0].T

    pts = draw(n)
    for _ in range(100):
        _, first = np.unique(pts, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(n), first)
        if dup.size == 0:
            break
        fresh = draw(n)
        pts[dup] = fresh[dup]
    else:  # pragma: no cover
        raise RuntimeError("could not draw pairwise-distinct points")
    return PointSet(pts)


def make_queries(
    points: PointSet,
    m: int,
    seed: int,
    mode: str = "jitter",
    jitter: float = 0.25,
    metric: str = "euclidean",
) -> np.ndarray:
    """Query points for search experiments.

    ``jitter`` mode perturbs a uniformly chosen data point by an isotropic Gaussian
    whose expected length is ``jitter`` times that point's nearest-neighbour
    distance. ``offset`` mode moves a uniformly chosen data point exactly ``jitter``
    in a uniformly random direction. ``uniform`` mode draws from the bounding box
    of the data.
    """
    rng = np.random.default_rng(derive_seed(seed, 7919))
    pts = points.points
    if mode == "uniform":
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return rng.uniform(lo, hi, size=(m, points.dim))
    if mode == "offset":
        base = rng.integers(0, points.n, size=m)
        step = rng.normal(size=(m, points.dim))
        step /= np.linalg.norm(step, axis=1, keepdims=True)
        return pts[base] + jitter * step
    if mode != "jitter":
        raise ValueError(f"unknown query mode {mode!r}")
    if points.n == 1:
        nn = np.ones(1)
    else:
        d = distance_matrix(points) if points.n <= 512 else None
        if d is not None:
            np.fill_diagonal(d, np.inf)
            nn = d.min(axis=1)
        else:
            nn = np.array([_nn_dist(pts, k) for k in range(points.n)])
    base = rng.integers(0, points.n, size=m)
    step = rng.normal(size=(m, points.dim))
    step /= np.linalg.norm(step, axis=1, keepdims=True)
    length = jitter * nn[base] * rng.uniform(0.5, 1.5, size=m)
    return pts[base] + step * length[:, None]


def _nn_dist(pts: np.ndarray, k: int) -> float:
    diff = pts - pts[k]
    d = np.einsum("ij,ij->i", diff, diff)
    d[k] = np.inf
    return float(np.sqrt(d.min()))


# --------------------------------------------------------------------------
# ground truth


def brute_force_nn(points: Union[PointSet, np.ndarray], q, metric: str = "euclidean", exclude: Optional[int] = None) -> int:
    """Exact nearest neighbour by full scan; ties go to the lowest index."""
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=float)
    if pts.shape[0] == 0:
        raise ValueError("brute_force_nn on an empty point set")
    q = np.asarray(q, dtype=float).reshape(-1)
    d = dissimilarities(pts, q, metric)
    if exclude is not None:
        if pts.shape[0] == 1:
            raise ValueError("no candidate left after exclusion")
        d[exclude] = np.inf
    return int(np.argmin(d))


def brute_force_nn_graph(points: Union[PointSet, np.ndarray], metric: str = "euclidean") -> NNGraph:
    pts = points if isinstance(points, PointSet) else PointSet(points)
    if pts.n < 2:
        raise ValueError("a nearest-neighbour graph needs at least two points")
    d = distance_matrix(pts, metric)
    np.fill_diagonal(d, np.inf)
    return NNGraph({k: int(np.argmin(d[k])) for k in range(pts.n)})


def estimate_expansion_constant(points: Union[PointSet, np.ndarray], metric: str = "euclidean") -> float:
    """Smallest ``c >= 2`` with ``|B(x, 2r)| <= c |B(x, r)|`` for all data ``x`` and ``r > 0``.

    Balls are closed. The ratio only changes where a ball boundary crosses a point,
    so it suffices to test radii equal to each pairwise distance and to half of it.
    """
    pts = points if isinstance(points, PointSet) else PointSet(points)
    if pts.n < 2:
        return 2.0
    d = distance_matrix(pts, metric)
    best = 2.0
    for k in range(pts.n):
        row = np.sort(d[k])
        radii = row[1:]
        radii = np.unique(np.concatenate([radii, radii / 2.0]))
        radii = radii[radii > 0]
        inner = np.searchsorted(row, radii, side="right")
        outer = np.searchsorted(row, 2.0 * radii, side="right")
        best = max(best, float(np.max(outer / inner)))
    return best


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentSpec:
    operation: str = "query"
    generator: Optional[str] = "gaussian-mixture"
    n: Union[int, List[int]] = 64
    dim: int = 2
    params: Dict[str, Any] = field(default_factory=dict)
    input: Optional[str] = None
    data_seed: int = 0
    oracle: str = "gaussian"
    sigma: float = 1.0
    subsample_len: Optional[int] = None
    delta: float = 0.1
    epsilon: Optional[float] = None
    trials: int = 1
    seed: int = 0
    queries_per_trial: int = 1
    query_mode: str = "jitter"
    jitter: float = 0.25
    tree_oracle: str = "exact"
    edits: int = 1
    t_max: int = 1_000_000
    lt_variant: bool = False
    expansion_bound: Optional[float] = None
    paired_exact: bool = False
    nested: bool = False
    workers: int = 1
    out: Optional[str] = None

    def __post_init__(self) -> None:
        if self.operation not in OPERATIONS:
            raise ValueError(f"unknown operation {self.operation!r}; expected one of {OPERATIONS}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.input is None and self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.input is not None and not Path(self.input).exists():
            raise FileNotFoundError(self.input)
        if self.tree_oracle not in ("exact", "same"):
            raise ValueError("tree_oracle must be 'exact' or 'same'")
        if self.operation == "approx" and self.epsilon is None:
            raise ValueError("the approx operation needs epsilon")
        OracleConfig(self.oracle, self.sigma, self.subsample_len, 0)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown experiment fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def sizes(self) -> List[int]:
        return list(self.n) if isinstance(self.n, (list, tuple)) else [int(self.n)]

    def snapshot(self) -> Dict[str, Any]:
        d = asdict(self)
        d.pop("out", None)
        d.pop("workers", None)
        return d


@dataclass
class ExperimentResult:
    reports: List[RunReport]
    summary: Dict[str, Any]


def _dataset(spec: ExperimentSpec, n: int) -> PointSet:
    if spec.input is not None:
        return load_points(spec.input)
    if not spec.nested:
        return generate_dataset(spec.generator, n, spec.dim, spec.params, spec.data_seed)
    # one draw at the largest size, sorted outward from the low corner; each n is a prefix
    full = generate_dataset(spec.generator, max(spec.sizes()), spec.dim, spec.params, spec.data_seed).points
    order = np.argsort(np.max(full - full.min(axis=0), axis=1), kind="stable")
    return PointSet(full[order[:n]])


def _oracle(spec: ExperimentSpec, points, seed: int, kind: Optional[str] = None) -> StochasticOracle:
    kind = kind or spec.oracle
    return StochasticOracle(points, kind, spec.sigma, spec.subsample_len, seed)


def _metric(spec: ExperimentSpec) -> str:
    return "sqeuclidean" if spec.oracle == "subsample" else "euclidean"


def _base_tree(spec: ExperimentSpec, points: PointSet, indices: Sequence[int]) -> CoverTree:
    kind = "exact" if spec.tree_oracle == "exact" else spec.oracle
    oracle = _oracle(spec, points, derive_seed(spec.seed, 0xB111D), kind)
    tree, _ = build(list(indices), spec.delta, oracle, t_max=spec.t_max)
    return tree


def _search_trial(spec: ExperimentSpec, points: PointSet, tree_text: str, n: int, trial: int) -> RunReport:
    tree = CoverTree.loads(tree_text)
    metric = _metric(spec)
    if spec.nested:
        # same queries and noise seeds at every n, placed around the smallest prefix
        seed = derive_seed(spec.seed, trial)
        base = PointSet(points.points[: min(spec.sizes())])
    else:
        seed = derive_seed(spec.seed, n, trial)
        base = points
    queries = make_queries(base, spec.queries_per_trial, seed, spec.query_mode, spec.jitter, metric)
    config = SearchConfig(
        delta=spec.delta,
        expansion_bound=spec.expansion_bound,
        epsilon_approx=spec.epsilon if spec.operation == "approx" else None,
        lt_variant=spec.lt_variant,
        t_max=spec.t_max,
    )
    t0 = time.perf_counter()
    total = 0
    hits = 0
    levels: List[Dict[str, Any]] = []
    outcome = "success"
    ratios = []
    paired = 0
    for qv in queries:
        oracle = _oracle(spec, points, seed)
        qi = oracle.add_point(qv)
        res = find_nearest(tree, qi, config, oracle)
        assert res.report.total_oracle_calls == oracle.call_count
        total += res.report.total_oracle_calls
        levels.extend(res.report.per_level_calls)
        if res.report.outcome != "success":
            outcome = res.report.outcome
        truth = brute_force_nn(points, qv, metric)
        if spec.operation == "approx":
            d_true = dissimilarity(qv, points[truth], metric)
            d_out = dissimilarity(qv, points[res.nn], metric)
            ratios.append(d_out / d_true if d_true > 0 else (1.0 if d_out == 0 else math.inf))
            hits += d_out <= (1.0 + spec.epsilon) * d_true
            if spec.paired_exact:
                o2 = _oracle(spec, points, seed)
                q2 = o2.add_point(qv)
                exact_cfg = SearchConfig(spec.delta, spec.expansion_bound, None, spec.lt_variant, spec.t_max)
                paired += find_nearest(tree, q2, exact_cfg, o2).report.total_oracle_calls
        else:
            hits += res.nn == truth
    report = RunReport(
        total_oracle_calls=total,
        per_level_calls=levels,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        outcome=outcome,
        seed=seed,
        config=_cfg(spec),
        extra={"n": n, "trial": trial, "queries": len(queries), "correct": int(hits)},
    )
    if ratios:
        report.extra["max_ratio"] = max(ratios)
    if spec.operation == "approx" and spec.paired_exact:
        report.extra["paired_exact_calls"] = paired
    return report


def _build_trial(spec: ExperimentSpec, points: PointSet, n: int, trial: int) -> RunReport:
    seed = derive_seed(spec.seed, n, trial)
    oracle = _oracle(spec, points, seed)
    t0 = time.perf_counter()
    tree, rep = build(points.n, spec.delta, oracle, t_max=spec.t_max)
    chk = check_invariants(tree, distance_matrix(points, _metric(spec)), range(points.n))
    return RunReport(
        total_oracle_calls=rep.total_oracle_calls,
        per_level_calls=rep.per_level_calls,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        outcome=rep.outcome,
        seed=seed,
        config=_cfg(spec),
        extra={
            "n": n,
            "trial": trial,
            "correct": int(chk["ok"]),
            "violations": len(chk["violations"]),
            "explicit_nodes": tree.explicit_count(),
            "height": tree.height(),
        },
    )


def _edit_trial(spec: ExperimentSpec, points: PointSet, n: int, trial: int) -> RunReport:
    seed = derive_seed(spec.seed, n, trial)
    rng = np.random.default_rng(seed)
    m = min(spec.edits, points.n - 1)
    chosen = sorted(rng.choice(points.n, size=m, replace=False).tolist())
    oracle = _oracle(spec, points, seed)
    t0 = time.perf_counter()
    rep = RunReport(seed=seed, config=_cfg(spec))
    if spec.operation == "insert":
        base = [k for k in range(points.n) if k not in set(chosen)]
        tree = _base_tree(spec, points, base)
        per = spec.delta / max(1, m)
        for p in chosen:
            insert(tree, p, per, oracle, t_max=spec.t_max, report=rep)
        expected = range(points.n)
    else:
        tree = _base_tree(spec, points, range(points.n))
        per = spec.delta / max(1, m)
        for p in chosen:
            remove(tree, p, per, oracle, t_max=spec.t_max, report=rep)
        expected = [k for k in range(points.n) if k not in set(chosen)]
    chk = check_invariants(tree, distance_matrix(points, _metric(spec)), expected)
    rep.total_oracle_calls = oracle.call_count
    rep.wall_time_ms = (time.perf_counter() - t0) * 1e3
    rep.extra = {
        "n": n,
        "trial": trial,
        "edited": chosen,
        "correct": int(chk["ok"]),
        "violations": len(chk["violations"]),
        "explicit_nodes": tree.explicit_count(),
    }
    return rep


def _graph_trial(spec: ExperimentSpec, points: PointSet, truth: Dict[int, int], n: int, trial: int) -> RunReport:
    seed = derive_seed(spec.seed, n, trial)
    oracle = _oracle(spec, points, seed)
    res = build_nn_graph(points.n, spec.delta, oracle, t_max=spec.t_max, lt_variant=spec.lt_variant)
    wrong = sum(res.graph.edges[k] != truth[k] for k in truth)
    rep = res.report
    rep.seed = seed
    rep.config = _cfg(spec)
    rep.extra.update({"n": n, "trial": trial, "correct": int(wrong == 0), "wrong_edges": int(wrong)})
    return rep


def _cfg(spec: ExperimentSpec) -> Dict[str, Any]:
    d = spec.snapshot()
    d.pop("n", None)
    return d


def _run_one(args) -> RunReport:
    kind, spec, points, extra, n, trial = args
    if kind == "search":
        return _search_trial(spec, points, extra, n, trial)
    if kind == "build":
        return _build_trial(spec, points, n, trial)
    if kind == "edit":
        return _edit_trial(spec, points, n, trial)
    return _graph_trial(spec, points, extra, n, trial)


def run_experiment(spec: ExperimentSpec, include_timing: bool = False) -> ExperimentResult:
    """Run every trial of ``spec``; write NDJSON reports and a summary if ``spec.out`` is set.

    Trial ``t`` at size ``n`` uses seed ``derive_seed(spec.seed, n, t)``. Results do
    not depend on ``spec.workers``.
    """
    jobs = []
    for n in spec.sizes():
        points = _dataset(spec, n)
        if spec.operation in ("query", "approx"):
            tree_text = _base_tree(spec, points, range(points.n)).dumps()
            jobs += [("search", spec, points, tree_text, n, t) for t in range(spec.trials)]
        elif spec.operation == "build":
            jobs += [("build", spec, points, None, n, t) for t in range(spec.trials)]
        elif spec.operation in ("insert", "remove"):
            jobs += [("edit", spec, points, None, n, t) for t in range(spec.trials)]
        else:
            truth = brute_force_nn_graph(points, _metric(spec)).edges
            jobs += [("graph", spec, points, truth, n, t) for t in range(spec.trials)]

    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [_run_one(j) for j in jobs]

    summary = summarize([r.to_dict() for r in reports], spec.operation)
    if spec.out:
        write_reports(reports, Path(spec.out), summary, include_timing)
    return ExperimentResult(reports, summary)


def summarize(records: Sequence[Dict[str, Any]], operation: Optional[str] = None) -> Dict[str, Any]:
    """Summary statistics computed from serialized reports alone."""
    by_n: Dict[int, List[Dict[str, Any]]] = {}
    for r in records:
        by_n.setdefault(int(r["n"]), []).append(r)
    rows = []
    for n in sorted(by_n):
        rs = by_n[n]
        units = sum(int(r.get("queries", 1)) for r in rs)
        calls = np.array([r["total_oracle_calls"] for r in rs], dtype=float)
        per_unit = calls.sum() / units
        row = {
            "n": n,
            "trials": len(rs),
            "units": units,
            "success_rate": sum(int(r["correct"]) for r in rs) / units,
            "mean_calls": float(per_unit),
            "calls_p10": float(np.quantile(calls, 0.1)),
            "calls_p50": float(np.quantile(calls, 0.5)),
            "calls_p90": float(np.quantile(calls, 0.9)),
            "capped_trials": sum(r["outcome"] == "capped" for r in rs),
        }
        if any("paired_exact_calls" in r for r in rs):
            paired = np.array([r.get("paired_exact_calls", 0) for r in rs], dtype=float)
            row["paired_exact_p50"] = float(np.quantile(paired, 0.5))
        rows.append(row)
    out: Dict[str, Any] = {"schema": SCHEMA_VERSION, "operation": operation, "table": rows}
    total_units = sum(r["units"] for r in rows)
    if total_units:
        out["success_rate"] = sum(r["success_rate"] * r["units"] for r in rows) / total_units
    if len(rows) > 1:
        out["scaling_ratio"] = rows[-1]["mean_calls"] / rows[0]["mean_calls"] if rows[0]["mean_calls"] else None
    return out


def write_reports(
    reports: Sequence[RunReport], out_dir: Path, summary: Dict[str, Any], include_timing: bool = False
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "reports.ndjson", "w") as fh:
        for r in reports:
            fh.write(r.to_json(include_timing) + "\n")
            fh.flush()
    _atomic_write(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if len(summary["table"]) > 0:
        lines = ["n,trials,success_rate,mean_calls,calls_p50"]
        for row in summary["table"]:
            lines.append(
                f"{row['n']},{row['trials']},{row['success_rate']:.6f},{row['mean_calls']:.3f},{row['calls_p50']:.1f}"
            )
        _atomic_write(out_dir / "scaling.csv", "\n".join(lines) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_reports(path: Union[str, Path]) -> List[Dict[str, Any]]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]
