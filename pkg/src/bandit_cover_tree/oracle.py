"""Stochastic distance oracles, the shared sample ledger and anytime confidence widths.

The algorithms in this package never see coordinates or exact distances. Everything
they know about the geometry comes through :meth:`StochasticOracle.query`, which
returns one noisy, unbiased sample of the distance between two indexed points.

Oracles and ledgers are single-writer objects. Distinct oracle instances (distinct
seeds) may be used from different threads; a shared instance must be serialized by
the caller.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

ORACLE_KINDS = ("exact", "gaussian", "subsample")

_NORMAL_BLOCK = 4096


class NoDataError(KeyError):
    """Raised when a mean is requested for a pair that was never sampled."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


@dataclass
class PointSet:
    """Dense, indexed collection of real vectors of a common dimension."""

    points: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.points, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ValueError(f"points must be a 2-d array, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("a point set needs at least one point")
        if not np.all(np.isfinite(arr)):
            raise ValueError("point coordinates must be finite")
        self.points = arr

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> np.ndarray:
        return self.points[i]

    def concat(self, other: Union["PointSet", np.ndarray]) -> "PointSet":
        extra = other.points if isinstance(other, PointSet) else np.asarray(other, float)
        return PointSet(np.vstack([self.points, np.atleast_2d(extra)]))


def load_csv(path: Union[str, Path]) -> PointSet:
    """One point per row, comma-separated floats, no header."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    _check_rectangular(rows, path)
    return PointSet(np.array(rows, dtype=float))


def load_ndjson(path: Union[str, Path]) -> PointSet:
    """Lines of ``{"id": k, "vec": [...]}``; ids must be exactly 0..n-1 (any order)."""
    by_id = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            k = int(rec["id"])
            if k in by_id:
                raise ValueError(f"{path}:{lineno}: duplicate id {k}")
            by_id[k] = [float(v) for v in rec["vec"]]
    if sorted(by_id) != list(range(len(by_id))):
        raise ValueError(f"{path}: ids must be dense 0..n-1")
    rows = [by_id[k] for k in range(len(by_id))]
    _check_rectangular(rows, path)
    return PointSet(np.array(rows, dtype=float))


def load_points(path: Union[str, Path]) -> PointSet:
    path = Path(path)
    if path.suffix in (".ndjson", ".jsonl"):
        return load_ndjson(path)
    return load_csv(path)


def save_csv(points: PointSet, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for row in points.points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def save_ndjson(points: PointSet, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for k, row in enumerate(points.points):
            fh.write(json.dumps({"id": k, "vec": [float(v) for v in row]}) + "\n")


def _check_rectangular(rows: list, path) -> None:
    if not rows:
        raise ValueError(f"{path}: no points")
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise ValueError(f"{path}: rows have differing dimensions {sorted(dims)}")


# --------------------------------------------------------------------------
# confidence widths


@dataclass(frozen=True)
class ConfidenceSchedule:
    """Anytime width ``sigma * sqrt(4 ln(log2(2t) / delta) / t)``.

    With probability at least ``1 - delta`` the running mean of a sigma-sub-Gaussian
    stream stays within ``width(t)`` of its expectation for every ``t >= 1`` at once.
    """

    delta: float
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ContractError(f"delta must lie in (0, 1), got {self.delta}")
        if self.sigma < 0:
            raise ContractError(f"sigma must be nonnegative, got {self.sigma}")

    def width(self, t: int) -> float:
        return width(t, self.delta, self.sigma)

    def widths(self, t: np.ndarray) -> np.ndarray:
        return widths(t, self.delta, self.sigma)


def width(t: int, delta: float, sigma: float = 1.0) -> float:
    if t < 1:
        raise ContractError(f"confidence width needs t >= 1, got {t}")
    return sigma * math.sqrt(4.0 * math.log(math.log2(2.0 * t) / delta) / t)


def widths(t: np.ndarray, delta: float, sigma: float = 1.0) -> np.ndarray:
    """Vectorised :func:`width`; entries with ``t < 1`` come back as ``inf``."""
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, np.inf)
    ok = t >= 1
    tt = t[ok]
    out[ok] = sigma * np.sqrt(4.0 * np.log(np.log2(2.0 * tt) / delta) / tt)
    return out


def samples_for_width(gap: float, delta: float) -> int:
    """Sample count after which ``width(t, delta) <= gap`` is guaranteed (sigma = 1).

    Valid for ``delta < 2 exp(-e/2)`` and ``gap <= 2``.
    """
    t = (4.0 / gap**2) * math.log((2.0 / delta) * math.log2(12.0 / (delta * gap**2)))
    return max(1, math.ceil(t))


# --------------------------------------------------------------------------
# sample ledger


def pair_key(i: int, j: int) -> tuple:
    return (i, j) if i <= j else (j, i)


class SampleLedger:
    """Running sums and pull counts per unordered pair of point indices."""

    __slots__ = ("_sums", "_counts")

    def __init__(self) -> None:
        self._sums: dict = {}
        self._counts: dict = {}

    def record(self, i: int, j: int, sample: float) -> None:
        if not math.isfinite(sample):
            raise ContractError(f"sample must be finite, got {sample}")
        key = pair_key(i, j)
        self._sums[key] = self._sums.get(key, 0.0) + sample
        self._counts[key] = self._counts.get(key, 0) + 1

    def add(self, i: int, j: int, total: float, count: int) -> None:
        """Fold in ``count`` samples whose sum is ``total``."""
        if count <= 0:
            return
        key = pair_key(i, j)
        self._sums[key] = self._sums.get(key, 0.0) + total
        self._counts[key] = self._counts.get(key, 0) + count

    def extend(self, i: int, j: int, samples: np.ndarray) -> None:
        """Record ``samples`` in order; the running sum matches repeated :meth:`record`."""
        if len(samples) == 0:
            return
        key = pair_key(i, j)
        acc = np.cumsum(np.concatenate(([self._sums.get(key, 0.0)], samples)))
        self._sums[key] = float(acc[-1])
        self._counts[key] = self._counts.get(key, 0) + len(samples)

    def count(self, i: int, j: int) -> int:
        return self._counts.get(pair_key(i, j), 0)

    def total(self, i: int, j: int) -> float:
        return self._sums.get(pair_key(i, j), 0.0)

    def mean(self, i: int, j: int) -> float:
        key = pair_key(i, j)
        c = self._counts.get(key, 0)
        if c == 0:
            raise NoDataError(f"no samples recorded for pair {key}")
        return self._sums[key] / c

    def merge(self, other: "SampleLedger") -> "SampleLedger":
        """Add every pair of ``other`` into this ledger (in place) and return self."""
        for key, c in other._counts.items():
            self._sums[key] = self._sums.get(key, 0.0) + other._sums[key]
            self._counts[key] = self._counts.get(key, 0) + c
        return self

    def pairs(self) -> Iterator[tuple]:
        return iter(self._counts)

    def total_count(self) -> int:
        return sum(self._counts.values())

    def __len__(self) -> int:
        return len(self._counts)

    def __contains__(self, key) -> bool:
        return pair_key(*key) in self._counts


# --------------------------------------------------------------------------
# oracles


@dataclass
class OracleConfig:
    kind: str = "gaussian"
    sigma: float = 1.0
    subsample_len: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ORACLE_KINDS:
            raise ValueError(f"unknown oracle kind {self.kind!r}; expected one of {ORACLE_KINDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.kind == "subsample" and (self.subsample_len is None or self.subsample_len < 1):
            raise ValueError("the subsample oracle needs subsample_len >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "sigma": self.sigma,
            "subsample_len": self.subsample_len,
            "seed": self.seed,
        }


class StochasticOracle:
    """Noisy, unbiased distance samples between indexed points.

    ``kind`` selects the noise model:

    * ``exact``: the Euclidean distance, no noise.
    * ``gaussian``: Euclidean distance plus N(0, sigma^2) noise.
    * ``subsample``: ``(L / l) * sum_k (x_k - y_k)^2`` over ``l`` coordinates drawn
      uniformly with replacement, an unbiased estimate of the squared Euclidean
      distance. ``sigma`` is the caller's effective sub-Gaussian scale for it. With
      ``l >= L`` every coordinate is used once and the estimate is exact.

    The point universe can grow with :meth:`add_point`, which is how query points
    that are not part of an index are made measurable.
    """

    def __init__(
        self,
        points: Union[PointSet, np.ndarray],
        kind: str = "gaussian",
        sigma: float = 1.0,
        subsample_len: Optional[int] = None,
        seed: int = 0,
    ) -> None:
        self.config = OracleConfig(kind, sigma, subsample_len, seed)
        ps = points if isinstance(points, PointSet) else PointSet(points)
        self._points = [row for row in ps.points]
        self._dim = ps.dim
        self.kind = kind
        self.sigma = float(sigma)
        self.subsample_len = subsample_len
        self.seed = int(seed)
        self.call_count = 0
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._normals = np.empty(0)
        self._pos = 0
        self._ints = np.empty(0, dtype=np.int64)
        self._ipos = 0
        self._cache: dict = {}
        self._full = kind == "subsample" and subsample_len >= self._dim

    @classmethod
    def from_config(cls, points, config: OracleConfig) -> "StochasticOracle":
        return cls(points, config.kind, config.sigma, config.subsample_len, config.seed)

    @property
    def noiseless(self) -> bool:
        """True when every sample equals the underlying dissimilarity."""
        if self.kind == "exact":
            return True
        if self.kind == "gaussian":
            return self.sigma == 0.0
        return self._full

    @property
    def metric(self) -> str:
        """Which dissimilarity the samples are unbiased for."""
        return "sqeuclidean" if self.kind == "subsample" else "euclidean"

    @property
    def n(self) -> int:
        return len(self._points)

    def __len__(self) -> int:
        return self.n

    def add_point(self, vec) -> int:
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.shape[0] != self._dim:
            raise ValueError(f"point has dimension {vec.shape[0]}, oracle expects {self._dim}")
        self._points.append(vec)
        return len(self._points) - 1

    def query(self, i: int, j: int) -> float:
        """One sample of the distance between points ``i`` and ``j``."""
        n = len(self._points)
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"oracle index out of range: ({i}, {j}) with n={n}")
        if i == j:
            raise ContractError(f"self-distance query ({i}, {i}) is not allowed")
        self.call_count += 1
        if self.kind == "subsample" and not self._full:
            return self._subsample(i, j)
        d = self._cached(i, j)
        if self.noiseless:
            return d
        return d + self.sigma * self._normal()

    def peek(self, i: int, j: int, k: int) -> np.ndarray:
        """The next ``k`` samples for ``(i, j)`` without consuming them or counting calls."""
        return self.peek_rounds(i, [j], k)[:, 0]

    def peek_rounds(self, i: int, js: Sequence[int], k: int) -> np.ndarray:
        """Samples ``(k, len(js))`` that ``k`` rounds of ``query(i, j)`` for ``j in js``
        (in that order) would return, without consuming them or counting calls.

        Only valid until the next call that draws randomness. :meth:`advance` then
        consumes a prefix, leaving the oracle exactly as that many :meth:`query`
        calls would have.
        """
        n = len(self._points)
        for j in js:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ContractError(f"invalid pair ({i}, {j})")
        m = len(js)
        if self.kind == "subsample" and not self._full:
            ell = self.subsample_len
            idx = self._rng_peek_integers(k * m * ell).reshape(k, m, ell)
            out = np.empty((k, m))
            for s, j in enumerate(js):
                out[:, s] = self._subsample_rows(i, j, idx[:, s])
            return out
        d = np.array([self._cached(i, j) for j in js])
        if self.noiseless:
            return np.broadcast_to(d, (k, m)).copy()
        self._fill(k * m)
        z = self._normals[self._pos : self._pos + k * m].reshape(k, m)
        return d + self.sigma * z

    def _cached(self, i: int, j: int) -> float:
        key = (i, j) if i < j else (j, i)
        d = self._cache.get(key)
        if d is None:
            d = self._true(i, j)
            self._cache[key] = d
        return d

    def advance(self, m: int) -> None:
        """Consume ``m`` samples previously returned by :meth:`peek`."""
        self.call_count += m
        if self.kind == "subsample" and not self._full:
            self._ipos += m * self.subsample_len
        elif not self.noiseless:
            self._pos += m

    def _fill(self, k: int) -> None:
        have = self._normals.shape[0] - self._pos
        if have >= k:
            return
        blocks = [self._normals[self._pos :]]
        while have < k:
            blocks.append(self._rng.standard_normal(_NORMAL_BLOCK))
            have += _NORMAL_BLOCK
        self._normals = np.concatenate(blocks)
        self._pos = 0

    def _rng_peek_integers(self, k: int) -> np.ndarray:
        have = self._ints.shape[0] - self._ipos
        if have < k:
            blocks = [self._ints[self._ipos :]]
            while have < k:
                blocks.append(self._rng.integers(0, self._dim, size=_NORMAL_BLOCK))
                have += _NORMAL_BLOCK
            self._ints = np.concatenate(blocks)
            self._ipos = 0
        return self._ints[self._ipos : self._ipos + k]

    def _true(self, i: int, j: int) -> float:
        return dissimilarity(self._points[i], self._points[j], self.metric)

    def _subsample(self, i: int, j: int) -> float:
        ell = self.subsample_len
        idx = self._rng_peek_integers(ell)[None, :]
        self._ipos += ell
        return float(self._subsample_rows(i, j, idx)[0])

    def _subsample_rows(self, i: int, j: int, idx: np.ndarray) -> np.ndarray:
        diff = self._points[i][idx] - self._points[j][idx]
        return self._dim / idx.shape[1] * np.sum(diff * diff, axis=1)

    def _normal(self) -> float:
        if self._pos >= self._normals.shape[0]:
            self._normals = self._rng.standard_normal(_NORMAL_BLOCK)
            self._pos = 0
        z = self._normals[self._pos]
        self._pos += 1
        return float(z)

    def __repr__(self) -> str:
        return (
            f"StochasticOracle(kind={self.kind!r}, sigma={self.sigma}, n={self.n}, "
            f"seed={self.seed}, calls={self.call_count})"
        )


def query(oracle: StochasticOracle, i: int, j: int) -> float:
    return oracle.query(i, j)


def dissimilarities(rows: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Exact dissimilarity from every row of ``rows`` to ``b``.

    The single code path for exact distances: oracles, ground truth and the
    invariant checker all reduce through here, so equal distances compare equal.
    """
    diff = np.atleast_2d(rows) - b
    sq = np.sum(diff * diff, axis=1)
    return sq if metric == "sqeuclidean" else np.sqrt(sq)


def dissimilarity(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> float:
    return float(dissimilarities(np.asarray(a, dtype=float)[None, :], b, metric)[0])


def exact_distance(points: Union[PointSet, np.ndarray], i: int, j: int, metric: str = "euclidean") -> float:
    pts = points.points if isinstance(points, PointSet) else np.asarray(points)
    return dissimilarity(pts[i], pts[j], metric)


def distance_matrix(points: Union[PointSet, np.ndarray], metric: str = "euclidean") -> np.ndarray:
    """Exact pairwise dissimilarities. Ground truth only; algorithms never call this."""
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=float)
    n = pts.shape[0]
    out = np.zeros((n, n))
    for i in range(n - 1):
        out[i, i + 1 :] = dissimilarities(pts[i + 1 :], pts[i], metric)
    return np.maximum(out, out.T)
