"""All-nearest-neighbour graph from a stochastic oracle, via a cover tree."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .bandits import DEFAULT_T_MAX
from .covertree import CoverTree, SearchConfig, build, find_nearest
from .oracle import ContractError, StochasticOracle
from .report import RunReport


@dataclass
class NNGraph:
    edges: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for src, dst in self.edges.items():
            if src == dst:
                raise ValueError(f"self-loop at {src}")

    def __len__(self) -> int:
        return len(self.edges)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, NNGraph):
            return self.edges == other.edges
        if isinstance(other, dict):
            return self.edges == other
        return NotImplemented

    def edge_list(self) -> List[tuple]:
        return sorted(self.edges.items())

    def to_ndjson(self) -> str:
        return "".join(
            json.dumps({"src": s, "dst": d}, separators=(",", ":")) + "\n" for s, d in self.edge_list()
        )

    def save(self, path: Union[str, Path], fmt: Optional[str] = None) -> None:
        path = Path(path)
        fmt = fmt or ("csv" if path.suffix == ".csv" else "ndjson")
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["src", "dst"])
                w.writerows(self.edge_list())
        else:
            path.write_text(self.to_ndjson())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NNGraph":
        path = Path(path)
        edges = {}
        if path.suffix == ".csv":
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    edges[int(row["src"])] = int(row["dst"])
        else:
            for line in path.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    edges[int(rec["src"])] = int(rec["dst"])
        return cls(edges)


@dataclass
class NNGraphResult:
    graph: NNGraph
    report: RunReport
    tree: CoverTree


def build_nn_graph(
    points: Union[int, Sequence[int]],
    delta: float,
    oracle: StochasticOracle,
    *,
    t_max: int = DEFAULT_T_MAX,
    lt_variant: bool = False,
) -> NNGraphResult:
    """Each point's nearest other point, all edges correct w.p. ``1 - delta``.

    Builds a cover tree at ``delta / 2``, then searches it once per point at
    ``delta / (2 n)``. The search keeps the point itself in every candidate set so
    that its subtree is still explored, but never offers it to the bandits.
    """
    idx = list(range(points)) if isinstance(points, int) else [int(p) for p in points]
    n = len(idx)
    if n < 2:
        raise ContractError("a nearest-neighbour graph needs at least two points")
    t0 = time.perf_counter()
    calls0 = oracle.call_count
    tree, build_report = build(idx, delta / 2.0, oracle, t_max=t_max)
    build_calls = oracle.call_count - calls0

    per_point = min(0.5, delta / (2.0 * n))
    config = SearchConfig(delta=per_point, lt_variant=lt_variant, t_max=t_max)
    edges: Dict[int, int] = {}
    query_calls = []
    outcome = build_report.outcome
    for x in idx:
        res = find_nearest(tree, x, config, oracle, exclude=x)
        edges[x] = res.nn
        query_calls.append(res.report.total_oracle_calls)
        if res.report.outcome != "success" and outcome == "success":
            outcome = res.report.outcome

    report = RunReport(
        total_oracle_calls=oracle.call_count - calls0,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        outcome=outcome,
        config={"delta": delta, "t_max": t_max, "n": n, "lt_variant": lt_variant},
        extra={"build_calls": build_calls, "query_calls": sum(query_calls), "per_point_query_calls": query_calls},
    )
    return NNGraphResult(NNGraph(edges), report, tree)
