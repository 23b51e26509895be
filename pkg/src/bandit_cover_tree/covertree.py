"""Cover trees built, searched and edited through a stochastic distance oracle.

Storage is one explicit record per point: the level where it first appears and its
parent there. Membership of level ``i`` is implicit, ``C_i = {p : top_level(p) >= i}``,
and ``children(p)`` at level ``i - 1`` is ``p`` itself plus the points whose record
names ``p`` as parent at that level. The three structural invariants are

* nesting: ``C_i`` is contained in ``C_{i-1}``,
* covering: a point first appearing at level ``i - 1`` lies within ``2**i`` of its
  parent, which appears at level ``i`` or higher,
* separation: distinct members of ``C_i`` are more than ``2**i`` apart.

A frozen tree may be searched concurrently (one oracle per thread). Insertion and
removal mutate the tree and need exclusive access.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .bandits import (
    DEFAULT_T_MAX,
    CoverQuery,
    find_smallest_in_set,
    identify_cover,
    threshold_partition,
)
from .oracle import ContractError, SampleLedger, StochasticOracle, width
from .report import SCHEMA_VERSION, RunReport

DEFAULT_LEVEL_FLOOR = -52


class CoverTreeError(Exception):
    pass


class EmptyTreeError(CoverTreeError):
    pass


class DuplicatePointError(CoverTreeError):
    def __init__(self, index: int, message: Optional[str] = None) -> None:
        self.index = index
        super().__init__(message or f"point {index} duplicates a point already in the tree")


class PointNotFoundError(CoverTreeError, KeyError):
    def __init__(self, index: int) -> None:
        self.index = index
        super().__init__(f"point {index} is not in the tree")


@dataclass
class CoverTree:
    top_level: Dict[int, int] = field(default_factory=dict)
    parent: Dict[int, Optional[int]] = field(default_factory=dict)
    # parent index -> level -> children first appearing at that level
    children: Dict[int, Dict[int, List[int]]] = field(default_factory=dict)
    root: Optional[int] = None
    i_top: int = 0
    i_bottom: int = 0
    level_floor: int = DEFAULT_LEVEL_FLOOR

    @property
    def size(self) -> int:
        return len(self.top_level)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, p: int) -> bool:
        return p in self.top_level

    def points(self) -> List[int]:
        return sorted(self.top_level)

    def members(self, level: int) -> List[int]:
        """``C_level``: every point explicit at ``level`` or above."""
        if level > self.i_top:
            return [self.root] if self.root is not None else []
        return sorted(p for p, t in self.top_level.items() if t >= level)

    def explicit_children(self, p: int, level: int) -> List[int]:
        return list(self.children.get(p, {}).get(level, ()))

    def children_of(self, nodes: Iterable[int], level: int) -> List[int]:
        """Union of ``children(p)`` at ``level`` for ``p`` in ``nodes`` (each ``p`` included)."""
        out = set()
        for p in nodes:
            out.add(p)
            out.update(self.children.get(p, {}).get(level, ()))
        return sorted(out)

    def explicit_count(self) -> int:
        return len(self.top_level)

    def height(self) -> int:
        return self.i_top - self.i_bottom

    def copy(self) -> "CoverTree":
        return CoverTree(
            top_level=dict(self.top_level),
            parent=dict(self.parent),
            children={p: {lv: list(c) for lv, c in d.items()} for p, d in self.children.items()},
            root=self.root,
            i_top=self.i_top,
            i_bottom=self.i_bottom,
            level_floor=self.level_floor,
        )

    # -- mutation helpers -------------------------------------------------

    def _attach(self, p: int, parent: Optional[int], level: int) -> None:
        self.top_level[p] = level
        self.parent[p] = parent
        if parent is not None:
            self.children.setdefault(parent, {}).setdefault(level, []).append(p)
            self.children[parent][level].sort()

    def _detach(self, p: int) -> None:
        par = self.parent.get(p)
        if par is not None:
            lv = self.top_level[p]
            kids = self.children[par][lv]
            kids.remove(p)
            if not kids:
                del self.children[par][lv]
                if not self.children[par]:
                    del self.children[par]

    def _set_root_level(self, level: int) -> None:
        self.top_level[self.root] = level
        self.i_top = level

    def _refresh_bounds(self) -> None:
        if self.root is None:
            self.i_top = self.i_bottom = 0
            return
        self.i_top = self.top_level[self.root]
        self.i_bottom = min(self.top_level.values())

    # -- serialization ----------------------------------------------------

    def to_records(self) -> List[dict]:
        header = {
            "schema": SCHEMA_VERSION,
            "i_top": self.i_top,
            "i_bottom": self.i_bottom,
            "root": self.root,
            "n": self.size,
            "level_floor": self.level_floor,
        }
        body = [
            {"id": p, "top_level": self.top_level[p], "parent": self.parent[p]}
            for p in sorted(self.top_level)
        ]
        return [header] + body

    def dumps(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.to_records())

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "CoverTree":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty tree file")
        header = json.loads(lines[0])
        if header.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported tree schema {header.get('schema')!r}")
        tree = cls(
            root=header["root"],
            i_top=int(header["i_top"]),
            i_bottom=int(header["i_bottom"]),
            level_floor=int(header.get("level_floor", DEFAULT_LEVEL_FLOOR)),
        )
        for ln in lines[1:]:
            rec = json.loads(ln)
            p = int(rec["id"])
            if p in tree.top_level:
                raise ValueError(f"tree file has two records for point {p}")
            par = rec["parent"]
            tree._attach(p, None if par is None else int(par), int(rec["top_level"]))
        if tree.size != int(header["n"]):
            raise ValueError(f"tree header says n={header['n']} but has {tree.size} records")
        return tree

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CoverTree":
        return cls.loads(Path(path).read_text())


@dataclass
class SearchConfig:
    delta: float = 0.1
    expansion_bound: Optional[float] = None
    epsilon_approx: Optional[float] = None
    lt_variant: bool = False
    t_max: int = DEFAULT_T_MAX

    def __post_init__(self) -> None:
        if not 0 < self.delta <= 0.5:
            raise ContractError(f"search needs 0 < delta <= 1/2, got {self.delta}")
        if self.expansion_bound is not None and self.expansion_bound < 2:
            raise ContractError("expansion_bound must be at least 2")
        if self.epsilon_approx is not None and not self.epsilon_approx > 0:
            raise ContractError("epsilon_approx must be positive")

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "expansion_bound": self.expansion_bound,
            "epsilon_approx": self.epsilon_approx,
            "lt_variant": self.lt_variant,
            "t_max": self.t_max,
        }


@dataclass
class SearchResult:
    nn: int
    report: RunReport


def union_size(n: int, expansion_bound: Optional[float] = None) -> int:
    """Number of bandit calls a search splits its failure budget across."""
    if expansion_bound is None:
        return n + 1
    depth = math.ceil(math.log(n) / math.log(1.0 + 1.0 / expansion_bound**2) + 1.0)
    return min(depth, n) + 1


# --------------------------------------------------------------------------
# search


def find_nearest(
    tree: CoverTree,
    q: int,
    config: SearchConfig,
    oracle: StochasticOracle,
    *,
    exclude: Optional[int] = None,
    trace: Optional[Callable[[dict], None]] = None,
) -> SearchResult:
    """Nearest neighbour of ``q`` among the tree's points, correct w.p. ``1 - delta``.

    Descends from ``i_top`` to ``i_bottom``, keeping at each level the children that
    may still have the nearest neighbour below them, then runs successive
    elimination on the last set. With ``config.epsilon_approx`` set, an
    ``(1 + eps)``-approximate neighbour is returned instead and the descent may stop
    early (see :func:`find_nearest_approx`).

    ``exclude`` names a tree point that is kept for navigation but never returned;
    this is how the nearest-neighbour graph asks for a point's neighbour other than
    itself.
    """
    if tree.root is None:
        raise EmptyTreeError("cannot search an empty tree")
    if q in tree and q != exclude:
        raise ContractError(f"query {q} is a point of the tree")
    t0 = time.perf_counter()
    calls0 = oracle.call_count
    n = tree.size
    alpha = union_size(n, config.expansion_bound)
    eps_approx = config.epsilon_approx
    report = RunReport(config=config.to_dict())
    split = 2 if eps_approx is not None else 1
    step_delta = config.delta / alpha / split
    capped = False

    current = [tree.root]
    result: Optional[int] = None
    for i in range(tree.i_top, tree.i_bottom, -1):
        level_calls0 = oracle.call_count
        cand = tree.children_of(current, i - 1)
        pool = [c for c in cand if c != exclude]
        if len(pool) == 0:
            nxt = []
        else:
            out = identify_cover(
                CoverQuery(q, pool, epsilon=2.0**i, gamma=2.0 ** (i - 1), delta=step_delta),
                oracle,
                lt_variant=config.lt_variant,
                t_max=config.t_max,
            )
            capped |= out.capped
            nxt = list(out.selected)
        if exclude is not None and exclude in cand:
            nxt = sorted(set(nxt) | {exclude})
        entry = {"level": i - 1, "candidates": len(cand), "kept": len(nxt)}
        current = nxt
        if eps_approx is not None and pool:
            theta = 2.0**i * (1.0 + 1.0 / eps_approx)
            test = [c for c in current if c != exclude]
            tp = threshold_partition(
                q,
                test,
                theta,
                step_delta,
                n,
                oracle,
                t_max=config.t_max,
                stop_on_below=True,
            )
            capped |= tp.capped
            if not tp.selected and len(tp.rejected) == len(test):
                entry["early_exit"] = True
                entry["calls"] = oracle.call_count - level_calls0
                report.per_level_calls.append(entry)
                final0 = oracle.call_count
                fs = find_smallest_in_set(q, test, step_delta, len(test), oracle, t_max=config.t_max)
                capped |= fs.capped
                result = fs.selected
                report.per_level_calls.append(
                    {"level": "final", "candidates": len(test), "calls": oracle.call_count - final0}
                )
                break
        entry["calls"] = oracle.call_count - level_calls0
        report.per_level_calls.append(entry)
        if trace is not None:
            trace(entry)

    if result is None:
        final = [c for c in current if c != exclude]
        if not final:
            final = _fallback_candidates(tree, exclude)
        final0 = oracle.call_count
        fs = find_smallest_in_set(q, final, step_delta, len(final), oracle, t_max=config.t_max)
        capped |= fs.capped
        result = fs.selected
        report.per_level_calls.append(
            {"level": "final", "candidates": len(final), "calls": oracle.call_count - final0}
        )

    report.total_oracle_calls = oracle.call_count - calls0
    report.wall_time_ms = (time.perf_counter() - t0) * 1e3
    report.mark_capped(capped)
    return SearchResult(nn=int(result), report=report)


def _fallback_candidates(tree: CoverTree, x: Optional[int]) -> List[int]:
    # x's parent and siblings; the root falls back to its own children
    if x is None:
        return []
    par = tree.parent.get(x)
    if par is None:
        kids = [c for lv in tree.children.get(x, {}).values() for c in lv]
        return sorted(kids)
    lv = tree.top_level[x]
    return sorted(set(tree.explicit_children(par, lv) + [par]) - {x})


def find_nearest_approx(
    tree: CoverTree, q: int, config: SearchConfig, oracle: StochasticOracle, **kw
) -> SearchResult:
    """A point within ``(1 + eps)`` of the nearest distance, w.p. ``1 - delta``.

    After each level's cover set ``Q`` is found, a threshold test checks whether
    every member of ``Q`` is confidently farther than ``2**(level + 1) * (1 + 1/eps)``.
    When that holds some member of ``Q`` is already an ``eps``-approximate neighbour
    and the closest one is returned without descending further. If the test never
    passes the search finishes as an exact one.
    """
    if config.epsilon_approx is None:
        raise ContractError("find_nearest_approx needs config.epsilon_approx")
    return find_nearest(tree, q, config, oracle, **kw)


# --------------------------------------------------------------------------
# insertion


def insert(
    tree: CoverTree,
    p: int,
    delta: float,
    oracle: StochasticOracle,
    ledger: Optional[SampleLedger] = None,
    *,
    t_max: int = DEFAULT_T_MAX,
    report: Optional[RunReport] = None,
) -> CoverTree:
    """Add point ``p`` so that all three invariants hold w.p. ``1 - delta``.

    Descends from the root keeping, at each level ``i``, the children within
    ``2**i`` of ``p`` (a threshold test with per-pair widths at ``delta / n``),
    until none remain. Walking back up, the first level whose kept set meets the
    level above it supplies the parent. Samples of ``d(p, .)`` are shared across
    all levels through ``ledger``. The tree is modified in place and returned.
    """
    if p in tree:
        raise DuplicatePointError(p, f"point {p} is already in the tree")
    if tree.root is None:
        tree._attach(p, None, 0)
        tree.root = p
        tree.i_top = tree.i_bottom = 0
        return tree
    ledger = ledger if ledger is not None else SampleLedger()
    n = tree.size
    capped = False
    root = tree.root

    # make sure the root covers p, raising the top level as needed
    while True:
        tp = threshold_partition(p, [root], 2.0**tree.i_top, delta, n, oracle, ledger, t_max=t_max)
        capped |= tp.capped
        if tp.selected:
            break
        t = ledger.count(p, root)
        ub = ledger.mean(p, root) + (0.0 if oracle.noiseless else width(t, delta / n, oracle.sigma))
        tree._set_root_level(max(tree.i_top + 1, math.ceil(math.log2(ub))))

    kept: Dict[int, List[int]] = {tree.i_top: [root]}
    i = tree.i_top
    while True:
        cand = tree.children_of(kept[i], i - 1)
        tp = threshold_partition(p, cand, 2.0**i, delta, n, oracle, ledger, t_max=t_max)
        capped |= tp.capped
        if not tp.selected:
            break
        if i - 1 < tree.level_floor:
            if report is not None:
                report.mark_capped(capped)
            raise DuplicatePointError(p)
        kept[i - 1] = tp.selected
        i -= 1

    for lv in range(i + 1, tree.i_top + 1):
        shared = sorted(set(kept[lv]) & set(kept[lv - 1]))
        if shared:
            par = min(shared, key=lambda j: (ledger.mean(p, j), j))
            tree._attach(p, par, lv - 1)
            # a lone root's level may have moved, so reset rather than lower
            tree.i_bottom = lv - 1 if n == 1 else min(tree.i_bottom, lv - 1)
            break
    else:  # pragma: no cover - the root check above guarantees a parent
        raise CoverTreeError(f"no parent found for point {p}")
    if report is not None:
        report.mark_capped(capped)
    return tree


def build(
    points: Union[Sequence[int], int],
    delta: float,
    oracle: StochasticOracle,
    *,
    t_max: int = DEFAULT_T_MAX,
    level_floor: int = DEFAULT_LEVEL_FLOOR,
) -> tuple:
    """Insert points one at a time, each at failure probability ``delta / n``.

    ``points`` is either a count (indices ``0..n-1`` of the oracle's universe) or an
    explicit list of indices. Returns ``(tree, report)``.
    """
    idx = list(range(points)) if isinstance(points, int) else [int(p) for p in points]
    if not idx:
        raise ContractError("build needs at least one point")
    t0 = time.perf_counter()
    calls0 = oracle.call_count
    tree = CoverTree(level_floor=level_floor)
    report = RunReport(config={"delta": delta, "t_max": t_max, "n": len(idx)})
    per = delta / len(idx)
    for p in idx:
        before = oracle.call_count
        insert(tree, p, per, oracle, t_max=t_max, report=report)
        report.per_level_calls.append({"point": p, "calls": oracle.call_count - before})
    report.total_oracle_calls = oracle.call_count - calls0
    report.wall_time_ms = (time.perf_counter() - t0) * 1e3
    return tree, report


# --------------------------------------------------------------------------
# removal


def remove(
    tree: CoverTree,
    p: int,
    delta: float,
    oracle: StochasticOracle,
    ledger: Optional[SampleLedger] = None,
    *,
    t_max: int = DEFAULT_T_MAX,
    report: Optional[RunReport] = None,
) -> CoverTree:
    """Delete point ``p``, re-homing its children; valid w.p. ``1 - delta``.

    First records, level by level, the tree points near ``p`` (within ``2**(i+1)``
    at level ``i``). Then, lowest level first, each orphaned child looks for a new
    parent among those points within ``2**i``; if none is confidently that close it
    is promoted one level and tries again. Per-pair widths use ``delta / n**2``.

    Removing the root promotes the root's highest-level child whose largest
    estimated distance to its siblings is smallest.
    """
    if p not in tree:
        raise PointNotFoundError(p)
    if tree.size == 1:
        tree.top_level.clear()
        tree.parent.clear()
        tree.children.clear()
        tree.root = None
        tree._refresh_bounds()
        return tree
    ledger = ledger if ledger is not None else SampleLedger()
    n = tree.size
    denom = n * n
    capped = False

    # near[i]: members of C_i within 2**(i+1) of p
    near: Dict[int, List[int]] = {tree.i_top: [tree.root]}
    for i in range(tree.i_top, tree.i_bottom, -1):
        cand = tree.children_of(near[i], i - 1)
        tp = threshold_partition(p, cand, 2.0**i, delta, denom, oracle, ledger, t_max=t_max)
        capped |= tp.capped
        near[i - 1] = tp.selected

    p_top = tree.top_level[p]
    orphans_by_level = {lv: list(kids) for lv, kids in tree.children.get(p, {}).items()}

    if p == tree.root:
        new_root, cap = _pick_new_root(tree, p, orphans_by_level, delta, denom, oracle, ledger, t_max)
        capped |= cap
        old_level = tree.top_level[new_root]
        orphans_by_level[old_level].remove(new_root)
        tree._detach(new_root)
        tree._detach(p)
        del tree.top_level[p], tree.parent[p]
        tree.children.pop(p, None)
        tree.root = new_root
        tree.top_level[new_root] = p_top
        tree.parent[new_root] = None
        for lv in range(old_level + 1, p_top + 1):
            near.setdefault(lv, [])
            if new_root not in near[lv]:
                near[lv] = sorted(near[lv] + [new_root])
    else:
        tree._detach(p)
        del tree.top_level[p], tree.parent[p]
        tree.children.pop(p, None)

    start_top = tree.i_top

    def pool(level: int) -> List[int]:
        got = set(near.get(level, ())) - {p}
        if level > start_top:
            got.add(tree.root)
        return sorted(got)

    for lv in sorted(orphans_by_level):
        for q in orphans_by_level[lv]:
            # q keeps its own children; only its parent link changes
            ip = lv + 1
            while True:
                cand = [c for c in pool(ip) if c != q]
                tp = threshold_partition(q, cand, 2.0**ip, delta, denom, oracle, ledger, t_max=t_max)
                capped |= tp.capped
                if tp.selected:
                    par = min(tp.selected, key=lambda j: (ledger.mean(q, j), j))
                    break
                near.setdefault(ip, [])
                near[ip] = sorted(set(near[ip]) | {q})
                ip += 1
            tree.top_level[q] = ip - 1
            tree.parent[q] = par
            tree.children.setdefault(par, {}).setdefault(ip - 1, []).append(q)
            tree.children[par][ip - 1].sort()
            if ip > tree.top_level[tree.root]:
                tree._set_root_level(ip)
    tree._refresh_bounds()
    if report is not None:
        report.mark_capped(capped)
    return tree


def _pick_new_root(tree, p, orphans_by_level, delta, denom, oracle, ledger, t_max):
    top = max(orphans_by_level)
    cands = sorted(orphans_by_level[top])
    if len(cands) == 1:
        return cands[0], False
    scores = {}
    for a in cands:
        worst = -math.inf
        for b in cands:
            if a == b:
                continue
            if ledger.count(a, b) == 0:
                ledger.record(a, b, oracle.query(a, b))
            t = ledger.count(a, b)
            w = 0.0 if oracle.noiseless else width(t, delta / denom, oracle.sigma)
            worst = max(worst, ledger.mean(a, b) + w)
        scores[a] = worst
    return min(cands, key=lambda a: (scores[a], a)), False


# --------------------------------------------------------------------------
# invariant checking (harness side: needs exact distances)


DistanceFn = Union[np.ndarray, Callable[[int, int], float]]


def check_invariants(tree: CoverTree, distances: DistanceFn, expected_points: Optional[Iterable[int]] = None) -> dict:
    """Verify nesting, covering, separation and one-record-per-point storage.

    ``distances`` is an exact distance matrix indexed by point id, or a callable
    ``d(i, j)``. Returns ``{"ok": bool, "violations": [...]}``; never raises.
    """
    dist = (lambda i, j: float(distances[i, j])) if isinstance(distances, np.ndarray) else distances
    violations: List[dict] = []

    def bad(kind: str, **detail) -> None:
        violations.append({"invariant": kind, **detail})

    pts = sorted(tree.top_level)
    if tree.root is None:
        if pts:
            bad("nesting", detail="tree has records but no root")
        return {"ok": not violations, "violations": violations}

    # storage: exactly one explicit record per point, child lists agree with parents
    listed: Dict[int, int] = {}
    for par, levels in tree.children.items():
        for lv, kids in levels.items():
            for c in kids:
                listed[c] = listed.get(c, 0) + 1
                if tree.parent.get(c) != par or tree.top_level.get(c) != lv:
                    bad("memory", point=c, detail=f"child list of {par} at level {lv} disagrees with its record")
    for c, k in listed.items():
        if k > 1:
            bad("memory", point=c, detail=f"{k} explicit records")
    for p in pts:
        if p != tree.root and listed.get(p, 0) != 1:
            bad("memory", point=p, detail="missing from its parent's child list")
    if set(tree.parent) != set(tree.top_level):
        bad("memory", detail="parent and level maps cover different points")
    if expected_points is not None and sorted(set(expected_points)) != pts:
        bad("memory", detail="explicit records do not match the point set")

    # nesting: levels decrease from parent to child, everything hangs off the root
    if tree.parent.get(tree.root) is not None:
        bad("nesting", point=tree.root, detail="root has a parent")
    if tree.top_level.get(tree.root) != tree.i_top:
        bad("nesting", point=tree.root, detail="root level differs from i_top")
    if pts and min(tree.top_level.values()) != tree.i_bottom:
        bad("nesting", detail="i_bottom differs from the lowest explicit level")
    for p in pts:
        if p == tree.root:
            continue
        par = tree.parent.get(p)
        if par is None or par not in tree.top_level:
            bad("nesting", point=p, detail="non-root point without a valid parent")
            continue
        if tree.top_level[par] <= tree.top_level[p]:
            bad("nesting", point=p, detail=f"parent {par} is not above level {tree.top_level[p]}")
        seen = {p}
        a = par
        while a is not None and a not in seen:
            seen.add(a)
            a = tree.parent.get(a)
        if a is not None:
            bad("nesting", point=p, detail="cycle in parent links")

    # covering
    for p in pts:
        par = tree.parent.get(p)
        if par is None or par not in tree.top_level:
            continue
        lv = tree.top_level[p]
        d = dist(p, par)
        if d > 2.0 ** (lv + 1):
            bad("covering", point=p, parent=par, level=lv, distance=d, bound=2.0 ** (lv + 1))

    # separation: a pair shares every level up to the lower of its two top levels
    for a_i, a in enumerate(pts):
        ta = tree.top_level[a]
        for b in pts[a_i + 1 :]:
            lv = min(ta, tree.top_level[b])
            d = dist(a, b)
            if d <= 2.0**lv:
                bad("separation", pair=[a, b], level=lv, distance=d, bound=2.0**lv)

    return {"ok": not violations, "violations": violations}
