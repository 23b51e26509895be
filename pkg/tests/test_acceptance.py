"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in the
terminal summary under "acceptance criteria".
"""

import math
import time

import numpy as np

from bandit_cover_tree.bandits import CoverQuery, identify_cover
from bandit_cover_tree.covertree import SearchConfig, build, check_invariants, find_nearest, insert, remove
from bandit_cover_tree.harness import (
    GENERATORS,
    ExperimentSpec,
    brute_force_nn,
    generate_dataset,
    make_queries,
    read_reports,
    run_experiment,
)
from bandit_cover_tree.oracle import StochasticOracle, samples_for_width, widths

# bounds from the criteria: p0 minus three binomial standard errors
def slack_floor(p0, runs):
    return p0 - 3 * math.sqrt(p0 * (1 - p0) / runs)


# separations large next to sigma = 1; ledgered
WIDE = {
    "gaussian-mixture": {"spread": 1000, "std": 50},
    "two-clusters": {"radius": 20, "separation": 1000},
    "line": {"spacing": 7.3},
    "uniform-cube": {},
    "low-dim-subspace": {},
}


def test_c1_exact_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    sizes = [16, 32, 64, 128, 256, 512, 48, 96, 200, 400]
    total = misses = 0
    for g, kind in enumerate(GENERATORS):
        for s, n in enumerate(sizes):
            pts = generate_dataset(kind, n, 3, seed=100 * g + s)
            o = StochasticOracle(pts, "exact")
            tree, _ = build(n, 0.1, o)
            qs = np.vstack([make_queries(pts, 5, s, "jitter"), make_queries(pts, 5, s, "uniform")])
            for qv in qs:
                got = find_nearest(tree, o.add_point(qv), SearchConfig(), o).nn
                misses += got != brute_force_nn(pts, qv)
                total += 1
    elapsed = time.perf_counter() - t0
    ok = total == 500 and misses == 0 and elapsed < 60
    verdict(1, "exact-oracle equivalence", ok, f"{total - misses}/{total} match, {elapsed:.1f}s (< 60s)")
    assert ok


def test_c2_search_accuracy(verdict):
    t0 = time.perf_counter()
    spec = ExperimentSpec(operation="query", generator="gaussian-mixture", n=256, dim=8, sigma=1.0,
                          delta=0.1, trials=200, seed=2)
    summary = run_experiment(spec).summary
    elapsed = time.perf_counter() - t0
    floor = slack_floor(0.9, 200)
    rate = summary["success_rate"]
    ok = rate >= floor and elapsed < 600
    verdict(2, "search accuracy", ok, f"success {rate:.3f} >= {floor:.3f}, {elapsed:.1f}s (< 600s)")
    assert ok


def test_c3_construction_validity(verdict):
    noisy = run_experiment(ExperimentSpec(operation="build", generator="gaussian-mixture", n=32, dim=2,
                                          delta=0.1, trials=50, seed=3))
    good_noisy = sum(r.extra["correct"] for r in noisy.reports)
    good_exact = 0
    for s in range(50):
        exact = run_experiment(ExperimentSpec(operation="build", generator="gaussian-mixture", n=32, dim=2,
                                              oracle="exact", trials=1, data_seed=s))
        good_exact += exact.reports[0].extra["correct"]
    ok = good_noisy >= 41 and good_exact == 50
    verdict(3, "construction validity", ok, f"noisy {good_noisy}/50 (>= 41), exact {good_exact}/50")
    assert ok


def test_c4_memory(verdict):
    checks = failures = 0
    for kind in GENERATORS:
        for seed in range(4):
            pts = generate_dataset(kind, 40, 2, WIDE[kind], seed=seed)
            for oracle_kind in ("exact", "gaussian"):
                o = StochasticOracle(pts, oracle_kind, seed=seed)
                tree, _ = build(20, 0.01, o)
                inside, outside = set(range(20)), set(range(20, 40))
                checks += 1
                failures += tree.explicit_count() != len(inside)
                rng = np.random.default_rng(seed)
                for _ in range(100):
                    if outside and (rng.random() < 0.5 or len(inside) < 2):
                        p = int(rng.choice(sorted(outside)))
                        insert(tree, p, 0.001, o)
                        outside.remove(p)
                        inside.add(p)
                    else:
                        p = int(rng.choice(sorted(inside)))
                        remove(tree, p, 0.001, o)
                        inside.remove(p)
                        outside.add(p)
                    checks += 1
                    failures += tree.explicit_count() != len(inside) or set(tree.points()) != inside
    ok = failures == 0
    verdict(4, "memory", ok, f"explicit count == point count in {checks - failures}/{checks} checks")
    assert ok


def test_c5_identify_cover_sandwich(verdict):
    delta, runs = 0.1, 500
    rng = np.random.default_rng(5)
    held = 0
    for seed in range(runs):
        k = int(rng.integers(2, 13))
        dists = rng.uniform(0.5, 5.0, size=k)
        eps = float(rng.uniform(0.25, 1.0))
        gamma = float(rng.uniform(0.1, 0.5))
        pts = np.concatenate([[0.0], dists])[:, None]
        o = StochasticOracle(pts, "gaussian", sigma=1.0, seed=seed)
        out = identify_cover(CoverQuery(0, list(range(1, k + 1)), eps, gamma, delta=delta), o)
        sel = {c - 1 for c in out.selected}
        must = set(np.flatnonzero(dists <= dists.min() + eps))
        may = set(np.flatnonzero(dists <= dists.min() + eps + gamma))
        held += must <= sel <= may
    floor = slack_floor(1 - delta, runs)
    ok = held / runs >= floor
    verdict(5, "identify-cover sandwich", ok, f"{held}/{runs} = {held / runs:.3f} >= {floor:.3f}")
    assert ok


def test_c6_approximate_search(verdict):
    spec = ExperimentSpec(operation="approx", generator="two-clusters", n=64, dim=2, params=WIDE["two-clusters"],
                          epsilon=1.0, delta=0.1, trials=500, seed=6, query_mode="offset", jitter=100.0,
                          paired_exact=True)
    res = run_experiment(spec)
    rate = res.summary["success_rate"]
    approx_med = float(np.median([r.total_oracle_calls for r in res.reports]))
    exact_med = float(np.median([r.extra["paired_exact_calls"] for r in res.reports]))
    ok = rate >= 0.86 and approx_med < exact_med
    verdict(6, "approximate search", ok,
            f"within 2x in {rate:.3f} (>= 0.86), median calls {approx_med:.0f} vs exact {exact_med:.0f}")
    assert ok


def test_c7_nn_graph(verdict):
    params = WIDE["gaussian-mixture"]
    noisy = run_experiment(ExperimentSpec(operation="nngraph", generator="gaussian-mixture", n=128, dim=2,
                                          params=params, delta=0.1, trials=20, seed=7))
    good_noisy = sum(r.extra["correct"] for r in noisy.reports)
    good_exact = 0
    for s in range(20):
        exact = run_experiment(ExperimentSpec(operation="nngraph", generator="gaussian-mixture", n=128, dim=2,
                                              params=params, oracle="exact", data_seed=s))
        good_exact += exact.reports[0].extra["correct"]
    ok = good_noisy >= 16 and good_exact == 20
    verdict(7, "nn-graph correctness", ok, f"noisy {good_noisy}/20 (>= 16), exact {good_exact}/20")
    assert ok


def test_c8_scaling(verdict):
    t0 = time.perf_counter()
    spec = ExperimentSpec(operation="query", generator="uniform-cube", n=[64, 128, 256, 512, 1024], dim=2,
                          trials=50, nested=True)
    summary = run_experiment(spec).summary
    elapsed = time.perf_counter() - t0
    means = [row["mean_calls"] for row in summary["table"]]
    ratio = means[-1] / means[0]
    monotone = all(a <= b for a, b in zip(means, means[1:]))
    ok = ratio < 16 and monotone and elapsed < 1800
    shown = ", ".join(f"{m:.0f}" for m in means)
    verdict(8, "scaling", ok, f"means [{shown}], ratio {ratio:.2f} (< 16), nondecreasing={monotone}, {elapsed:.1f}s")
    assert ok


def test_c9_confidence_schedule(verdict):
    grid_ok = True
    for gap in (0.1, 0.5, 1.0):
        for delta in (0.01, 0.05):
            t = samples_for_width(gap, delta)
            bound = math.ceil((4 / gap**2) * math.log((2 / delta) * math.log2(12 / (delta * gap**2))))
            grid_ok &= t == bound and widths(np.array([t]), delta)[0] <= gap
    delta, horizon, runs = 0.1, 1000, 500
    w = widths(np.arange(1, horizon + 1), delta)
    covered = 0
    for seed in range(runs):
        o = StochasticOracle(np.array([[0.0], [2.0]]), "gaussian", seed=seed)
        draws = o.peek_rounds(0, [1], horizon)[:, 0]
        mean = np.cumsum(draws) / np.arange(1, horizon + 1)
        covered += bool(np.all(np.abs(mean - 2.0) <= w))
    ok = grid_ok and covered >= (1 - delta) * runs
    verdict(9, "confidence schedule", ok, f"inversion grid {'ok' if grid_ok else 'broken'}, coverage {covered}/{runs}")
    assert ok


def test_c10_determinism(verdict, tmp_path):
    specs = {
        "query": dict(operation="query", generator="gaussian-mixture", n=[32, 64], trials=3, queries_per_trial=2),
        "approx": dict(operation="approx", generator="two-clusters", n=32, params=WIDE["two-clusters"], epsilon=1.0,
                       trials=3, query_mode="offset", jitter=100.0, paired_exact=True),
        "build": dict(operation="build", generator="uniform-cube", n=24, trials=2),
        "insert": dict(operation="insert", generator="line", n=20, params=WIDE["line"], trials=2, edits=3,
                       tree_oracle="same"),
        "remove": dict(operation="remove", generator="low-dim-subspace", n=20, dim=5, trials=2, edits=3),
        "nngraph": dict(operation="nngraph", generator="gaussian-mixture", n=24, params=WIDE["gaussian-mixture"],
                        trials=2),
        "subsample": dict(operation="query", generator="uniform-cube", n=32, dim=6, oracle="subsample",
                          subsample_len=2, trials=3),
    }
    same = 0
    for name, kw in specs.items():
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            run_experiment(ExperimentSpec(seed=10, out=str(out), **kw))
            blobs.append((out / "reports.ndjson").read_bytes())
        same += blobs[0] == blobs[1] and len(read_reports(out / "reports.ndjson")) > 0
    ok = same == len(specs)
    verdict(10, "determinism", ok, f"{same}/{len(specs)} experiments byte-identical on rerun")
    assert ok
