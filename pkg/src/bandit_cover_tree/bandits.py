"""Adaptive sampling subroutines that every tree operation is assembled from.

* :func:`identify_cover` finds every candidate within ``epsilon`` of the closest one
  (and none beyond ``epsilon + gamma``), an all-epsilon-good arm identification.
* :func:`threshold_partition` splits candidates into those within ``theta`` of the
  anchor and those beyond it.
* :func:`find_smallest_in_set` is successive elimination for the closest candidate.

All three draw samples only through the oracle, keep per-pair running means in a
:class:`~bandit_cover_tree.oracle.SampleLedger` and stop as soon as the anytime
confidence intervals settle the question. Ties in every argmin/argmax go to the
lowest point index. When the oracle is noiseless one sample per pair is taken and
comparisons are exact.

Zero-gap instances (a distance exactly on a threshold, or two exactly tied minima)
would sample forever, so each pair is limited to ``t_max`` pulls; at the cap the
pair is classified by its empirical mean and the outcome is flagged ``capped``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .oracle import ContractError, SampleLedger, StochasticOracle

DEFAULT_T_MAX = 1_000_000

Trace = Optional[Callable[[dict], None]]


@dataclass
class CoverQuery:
    anchor: int
    candidates: List[int]
    epsilon: float
    gamma: Optional[float] = None
    delta: float = 0.1
    union_denominator: Optional[int] = None

    def __post_init__(self) -> None:
        if self.gamma is None:
            self.gamma = self.epsilon / 2.0
        if self.union_denominator is None:
            self.union_denominator = max(1, len(self.candidates))
        if not self.epsilon > 0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma < 0:
            raise ContractError(f"gamma must be nonnegative, got {self.gamma}")
        if not 0 < self.delta < 1:
            raise ContractError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.candidates:
            raise ContractError("identify_cover needs at least one candidate")
        if self.union_denominator < 1:
            raise ContractError("union_denominator must be a positive integer")


@dataclass
class BanditOutcome:
    """What a bandit call decided, and what it cost.

    ``selected`` is the returned set (or single index for
    :func:`find_smallest_in_set`); ``rejected`` holds the complementary
    candidates where that is meaningful. ``ledger`` contains only the samples drawn
    by this call, so ``ledger.total_count() == oracle_calls``.
    """

    selected: object
    rejected: List[int] = field(default_factory=list)
    oracle_calls: int = 0
    ledger: SampleLedger = field(default_factory=SampleLedger)
    capped: bool = False


_TABLES: dict = {}


def _width_table(sigma: float, dp: float, size: int) -> np.ndarray:
    # entries are computed once and never recomputed, so every caller sees the same bits
    key = (sigma, dp)
    tab = _TABLES.get(key)
    if tab is None or tab.shape[0] < size:
        if tab is None:
            if len(_TABLES) >= 256:
                _TABLES.clear()
            tab = np.array([np.inf])
        lo = tab.shape[0]
        hi = max(size, 2 * lo, 64)
        tt = np.arange(lo, hi, dtype=float)
        ext = sigma * np.sqrt(4.0 * np.log(np.log2(2.0 * tt) / dp) / tt)
        tab = np.concatenate((tab, ext))
        _TABLES[key] = tab
    return tab


class _Arms:
    """Per-call sampling state for one anchor against a list of candidates.

    Widths come from a table filled once per entry, so the one-pull and the batched
    paths below see bit-identical bounds and make identical decisions.
    """

    def __init__(
        self,
        anchor: int,
        candidates: Sequence[int],
        oracle: StochasticOracle,
        ledger: Optional[SampleLedger],
        delta_per_pair: float,
        t_max: int,
        trace: Trace,
    ) -> None:
        self.anchor = anchor
        self.idx = list(candidates)
        self.oracle = oracle
        self.shared = ledger
        self.fresh = SampleLedger()
        self.dp = delta_per_pair
        self.sigma = oracle.sigma
        self.t_max = t_max
        self.trace = trace
        self.calls = 0
        self.rounds = 0
        self._tab = _width_table(self.sigma, self.dp, 64)
        self.noiseless = oracle.noiseless
        k = len(self.idx)
        self.sums = np.zeros(k)
        self.counts = np.zeros(k, dtype=np.int64)
        self.mean = np.full(k, np.nan)
        self.wid = np.full(k, np.inf)
        if ledger is not None:
            for a, j in enumerate(self.idx):
                c = ledger.count(anchor, j)
                if c:
                    self.sums[a] = ledger.total(anchor, j)
                    self.counts[a] = c
                    self._refresh(a)

    @property
    def batched(self) -> bool:
        # the trace wants one event per pull
        return self.trace is None

    def widths(self, t):
        """Width after ``t`` pulls (``inf`` for ``t = 0``); ``t`` may be an array."""
        top = int(np.max(t))
        if top >= self._tab.shape[0]:
            self._tab = _width_table(self.sigma, self.dp, top + 1)
        return self._tab[t]

    def _refresh(self, a: int) -> None:
        t = int(self.counts[a])
        self.mean[a] = self.sums[a] / t
        if self.noiseless:
            self.wid[a] = 0.0
        elif t < self._tab.shape[0]:
            self.wid[a] = self._tab[t]
        else:
            self.wid[a] = self.widths(t)

    def pull(self, a: int) -> None:
        j = self.idx[a]
        x = self.oracle.query(self.anchor, j)
        self.calls += 1
        self.sums[a] += x
        self.counts[a] += 1
        self.fresh.record(self.anchor, j, x)
        if self.shared is not None:
            self.shared.record(self.anchor, j, x)
        self._refresh(a)
        if self.trace is not None:
            self.trace(
                {
                    "round": self.rounds,
                    "index": j,
                    "mean": float(self.mean[a]),
                    "width": float(self.wid[a]),
                }
            )

    def peek(self, arms: Sequence[int], rounds: int):
        """State after each of the next ``rounds`` rounds of pulling ``arms`` in order.

        Returns ``(samples, sums, counts, mean, wid)``, each of shape
        ``(rounds, len(arms))``; nothing is consumed until :meth:`commit`.
        """
        js = [self.idx[a] for a in arms]
        x = self.oracle.peek_rounds(self.anchor, js, rounds)
        sums = np.cumsum(np.vstack((self.sums[arms][None, :], x)), axis=0)[1:]
        counts = self.counts[arms][None, :] + np.arange(1, rounds + 1)[:, None]
        return x, sums, counts, sums / counts, self.widths(counts)

    def commit(self, arms: Sequence[int], x: np.ndarray, sums: np.ndarray, rounds: int) -> None:
        """Consume the first ``rounds`` rounds of a :meth:`peek`."""
        self.oracle.advance(rounds * len(arms))
        self.calls += rounds * len(arms)
        self.rounds += rounds
        for s, a in enumerate(arms):
            j = self.idx[a]
            self.fresh.extend(self.anchor, j, x[:rounds, s])
            if self.shared is not None:
                self.shared.extend(self.anchor, j, x[:rounds, s])
            self.sums[a] = sums[rounds - 1, s]
            self.counts[a] += rounds
            self._refresh(a)

    def pull_until(self, a: int, theta: float, runner_up: float) -> int:
        """Pull arm ``a`` until it settles against ``theta``, its lower bound passes
        ``runner_up``, or it reaches ``t_max``. Same draws as repeated :meth:`pull`."""
        if not self.batched:
            while self.counts[a] < self.t_max:
                self.pull(a)
                if _threshold_state(self, a, theta) or self.mean[a] - self.wid[a] > runner_up:
                    break
            return _threshold_state(self, a, theta)
        block = 16
        while self.counts[a] < self.t_max:
            k = min(block, self.t_max - int(self.counts[a]))
            x, sums, _, mean, wid = self.peek([a], k)
            mean, wid = mean[:, 0], wid[:, 0]
            stop = (mean + wid <= theta) | (mean - wid > theta) | (mean - wid > runner_up)
            hit = np.flatnonzero(stop)
            m = int(hit[0]) + 1 if hit.size else k
            self.commit([a], x, sums, m)
            if hit.size:
                break
            block = min(block * 4, 1 << 16)
        return _threshold_state(self, a, theta)

    def init_unsampled(self) -> None:
        for a in np.flatnonzero(self.counts == 0):
            self.pull(int(a))

    def ucb(self) -> np.ndarray:
        return self.mean + self.wid

    def lcb(self) -> np.ndarray:
        return self.mean - self.wid

    def capped_mask(self) -> np.ndarray:
        return self.counts >= self.t_max

    def outcome(self, selected, rejected=(), capped=False) -> BanditOutcome:
        return BanditOutcome(
            selected=selected,
            rejected=list(rejected),
            oracle_calls=self.calls,
            ledger=self.fresh,
            capped=bool(capped),
        )


def _sorted_unique(candidates: Sequence[int]) -> List[int]:
    return sorted(set(int(c) for c in candidates))


# --------------------------------------------------------------------------


def identify_cover(
    query: CoverQuery,
    oracle: StochasticOracle,
    ledger: Optional[SampleLedger] = None,
    *,
    lt_variant: bool = False,
    t_max: int = DEFAULT_T_MAX,
    trace: Trace = None,
) -> BanditOutcome:
    """Return ``G`` with ``{j : d_j <= d_min + eps} <= G <= {j : d_j <= d_min + eps + gamma}``.

    ``d_j`` is the distance from ``query.anchor`` to candidate ``j`` and ``d_min`` the
    smallest such distance; the containment holds with probability
    ``1 - query.delta``. Per-pair intervals are built at ``delta / union_denominator``.

    Each round samples three arms: the empirically good unsettled arm with the
    lowest upper bound, the empirically bad unsettled arm with the highest lower
    bound, and the arm with the lowest lower bound overall (which drives both
    thresholds). It stops once every arm is confidently above ``U`` or below ``L``.

    With ``lt_variant`` the lower threshold drops the ``gamma`` slack, so the output
    is exactly the epsilon-cover at the price of more samples near the boundary.
    """
    cands = _sorted_unique(query.candidates)
    if query.anchor in cands:
        raise ContractError("identify_cover: the anchor must not be among the candidates")
    eps, gamma = query.epsilon, query.gamma
    arms = _Arms(
        query.anchor, cands, oracle, ledger, query.delta / query.union_denominator, t_max, trace
    )
    if len(cands) == 1:
        return arms.outcome(list(cands))

    arms.init_unsampled()
    if oracle.noiseless:
        d = arms.mean
        keep = d <= d.min() + eps
        return arms.outcome(
            [c for c, k in zip(cands, keep) if k], [c for c, k in zip(cands, keep) if not k]
        )

    slack = 0.0 if lt_variant else gamma
    k = len(cands)
    block = 8
    while True:
        known, capped, picks = _cover_round(
            arms.mean[None, :], arms.wid[None, :], arms.counts[None, :], eps, slack, t_max
        )
        known, capped, picks = known[0], capped[0], [int(a) for a in picks[0] if a >= 0]
        if not picks:
            break
        if not arms.batched:
            arms.rounds += 1
            for a in picks:
                arms.pull(a)
            continue
        # replay `picks` speculatively; keep the prefix where the next round agrees
        r = min(block, t_max - int(arms.counts[picks].max()))
        x, sums, counts, mean, wid = arms.peek(picks, r)
        M = np.repeat(arms.mean[None, :], r, axis=0)
        W = np.repeat(arms.wid[None, :], r, axis=0)
        N = np.repeat(arms.counts[None, :], r, axis=0)
        M[:, picks], W[:, picks], N[:, picks] = mean, wid, counts
        _, _, nxt = _cover_round(M, W, N, eps, slack, t_max)
        want = np.full(3, -1)
        want[: len(picks)] = picks
        differ = np.flatnonzero(np.any(nxt != want, axis=1))
        used = int(differ[0]) + 1 if differ.size else r
        arms.commit(picks, x, sums, used)
        block = min(block * 2, 4096) if not differ.size else max(8, block // 2)

    m = arms.mean
    ucb = arms.ucb()
    lower = arms.lcb().min() + eps + slack
    unsettled_capped = ~known & capped
    inside = (ucb < lower) | (unsettled_capped & (m <= m.min() + eps))
    sel = [cands[a] for a in range(k) if inside[a]]
    rej = [cands[a] for a in range(k) if not inside[a]]
    return arms.outcome(sel, rej, capped=unsettled_capped.any())


def _cover_round(mean, wid, counts, eps, slack, t_max):
    """One identify_cover decision per row of ``(rounds, arms)`` state arrays.

    Returns ``known``, ``capped`` and the pulls of the next round as an
    ``(rounds, 3)`` array of arm positions in pull order, ``-1`` for unused slots.
    An all ``-1`` row means the call is finished.
    """
    ucb = mean + wid
    lcb = mean - wid
    good = mean <= mean.min(axis=1, keepdims=True) + eps
    upper = ucb.min(axis=1, keepdims=True) + eps
    lower = lcb.min(axis=1, keepdims=True) + eps + slack
    known = (lcb > upper) | (ucb < lower)
    capped = counts >= t_max
    open_ = ~known & ~capped
    rows = np.arange(mean.shape[0])
    g_open = open_ & good
    b_open = open_ & ~good
    j1 = np.where(g_open.any(axis=1), np.argmin(np.where(g_open, ucb, np.inf), axis=1), -1)
    j2 = np.where(b_open.any(axis=1), np.argmax(np.where(b_open, lcb, -np.inf), axis=1), -1)
    js = np.argmin(lcb, axis=1)
    js = np.where(capped[rows, js], -1, js)
    j2 = np.where(j2 == j1, -1, j2)
    js = np.where((js == j1) | (js == j2), -1, js)
    picks = np.stack((j1, j2, js), axis=1)
    # pack the used slots to the front, keeping their order
    order = np.argsort(picks < 0, axis=1, kind="stable")
    picks = np.take_along_axis(picks, order, axis=1)
    picks[~open_.any(axis=1)] = -1
    return known, capped, picks


def threshold_partition(
    anchor: int,
    candidates: Sequence[int],
    theta: float,
    delta: float,
    union_denominator: int,
    oracle: StochasticOracle,
    ledger: Optional[SampleLedger] = None,
    *,
    t_max: int = DEFAULT_T_MAX,
    stop_on_below: bool = False,
    trace: Trace = None,
) -> BanditOutcome:
    """Split candidates into ``selected = {j : d_j <= theta}`` and ``rejected``.

    Samples already in ``ledger`` for a pair are reused; only pairs with no samples
    get an initial pull. The unsettled arm with the smallest lower bound is sampled
    until it settles or stops being the smallest. The anchor itself, if listed, is
    classified below the threshold without sampling.

    With ``stop_on_below`` the call returns as soon as any candidate is confidently
    within ``theta``; the partition is then partial and ``rejected`` lists only the
    candidates confidently beyond ``theta``.
    """
    if not theta > 0:
        raise ContractError(f"theta must be positive, got {theta}")
    if not 0 < delta < 1:
        raise ContractError(f"delta must lie in (0, 1), got {delta}")
    cands = _sorted_unique(candidates)
    self_hit = anchor in cands
    if self_hit:
        cands.remove(anchor)
    arms = _Arms(anchor, cands, oracle, ledger, delta / max(1, union_denominator), t_max, trace)
    if not cands:
        return arms.outcome([anchor] if self_hit else [], [])

    if oracle.noiseless:
        below, above = [anchor] if self_hit else [], []
        for a, j in enumerate(cands):
            if arms.counts[a] == 0:
                arms.pull(a)
            (below if arms.mean[a] <= theta else above).append(j)
            if stop_on_below and below:
                break
        return arms.outcome(sorted(below), above)

    if stop_on_below and self_hit:
        return arms.outcome([anchor], [])
    arms.init_unsampled()
    k = len(cands)
    # state: 0 open, 1 below, 2 above
    state = [0] * k
    capped = False
    for a in range(k):
        state[a] = _threshold_state(arms, a, theta)
    while True:
        if stop_on_below and 1 in state:
            break
        open_ = [a for a in range(k) if state[a] == 0]
        if not open_:
            break
        lcb = arms.mean - arms.wid
        open_.sort(key=lambda a: (lcb[a], a))
        a = open_[0]
        runner_up = lcb[open_[1]] if len(open_) > 1 else math.inf
        arms.rounds += 1
        if arms.counts[a] < t_max:
            state[a] = arms.pull_until(a, theta, runner_up)
        if state[a] == 0 and arms.counts[a] >= t_max:
            state[a] = 1 if arms.mean[a] <= theta else 2
            capped = True
    below = [anchor] if self_hit else []
    below += [cands[a] for a in range(k) if state[a] == 1]
    above = [cands[a] for a in range(k) if state[a] == 2]
    return arms.outcome(sorted(below), above, capped=capped)


def _threshold_state(arms: _Arms, a: int, theta: float) -> int:
    m, w = arms.mean[a], arms.wid[a]
    if m + w <= theta:
        return 1
    if m - w > theta:
        return 2
    return 0


def find_smallest_in_set(
    anchor: int,
    candidates: Sequence[int],
    delta: float,
    union_denominator: Optional[int],
    oracle: StochasticOracle,
    ledger: Optional[SampleLedger] = None,
    *,
    t_max: int = DEFAULT_T_MAX,
    trace: Trace = None,
) -> BanditOutcome:
    """Successive elimination: the candidate closest to ``anchor``, w.p. ``1 - delta``.

    Every surviving candidate is sampled once per round; a candidate is eliminated
    once its lower bound exceeds the smallest upper bound among survivors.
    """
    cands = _sorted_unique(candidates)
    if not cands:
        raise ContractError("find_smallest_in_set needs at least one candidate")
    if anchor in cands:
        raise ContractError("find_smallest_in_set: the anchor must not be among the candidates")
    denom = union_denominator if union_denominator else len(cands)
    arms = _Arms(anchor, cands, oracle, ledger, delta / denom, t_max, trace)
    if len(cands) == 1:
        return arms.outcome(cands[0], [])

    arms.init_unsampled()
    if oracle.noiseless:
        best = int(np.argmin(arms.mean))
        return arms.outcome(cands[best], [c for c in cands if c != cands[best]])

    alive = np.ones(len(cands), dtype=bool)
    capped = False
    block = 8
    while True:
        ucb = arms.ucb()
        lcb = arms.lcb()
        live = np.flatnonzero(alive)
        best_ucb = ucb[live].min()
        alive &= ~(lcb > best_ucb)
        live = np.flatnonzero(alive)
        if live.size == 1:
            break
        if (arms.counts[live] >= t_max).any():
            capped = True
            break
        if not arms.batched:
            arms.rounds += 1
            for a in live:
                arms.pull(int(a))
            continue
        # rounds until an elimination or the cap changes the live set
        live = [int(a) for a in live]
        r = min(block, t_max - int(arms.counts[live].max()))
        x, sums, counts, mean, wid = arms.peek(live, r)
        lcb_r, ucb_r = mean - wid, mean + wid
        change = (lcb_r > ucb_r.min(axis=1, keepdims=True)).any(axis=1) | (counts >= t_max).any(axis=1)
        hit = np.flatnonzero(change)
        used = int(hit[0]) + 1 if hit.size else r
        arms.commit(live, x, sums, used)
        block = min(block * 2, 4096)
    live = np.flatnonzero(alive)
    best = int(live[np.argmin(arms.mean[live])])
    return arms.outcome(cands[best], [c for c in cands if c != cands[best]], capped=capped)
