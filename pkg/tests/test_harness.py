import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandit_cover_tree.covertree import SearchConfig, build, find_nearest
from bandit_cover_tree.harness import (
    GENERATORS,
    ExperimentSpec,
    brute_force_nn,
    derive_seed,
    estimate_expansion_constant,
    generate_dataset,
    read_reports,
    run_experiment,
    summarize,
)
from bandit_cover_tree.oracle import StochasticOracle


def enumerate_expansion(xs):
    """Independent check for points on a line: exact rationals, radii on a 1/4 grid."""
    xs = [Fraction(x) for x in xs]
    if len(xs) < 2:
        return 2
    span = max(xs) - min(xs)
    best = Fraction(2)
    r = Fraction(1, 4)
    while r <= span:
        for x in xs:
            inner = sum(abs(x - y) <= r for y in xs)
            outer = sum(abs(x - y) <= 2 * r for y in xs)
            best = max(best, Fraction(outer, inner))
        r += Fraction(1, 4)
    return best


# -- datasets ----------------------------------------------------------------


def test_line_generator():
    pts = generate_dataset("line", 5, 1)
    assert pts.points[:, 0].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]


@pytest.mark.parametrize("kind", GENERATORS)
def test_generators_are_deterministic_and_distinct(kind):
    a = generate_dataset(kind, 50, 3, seed=7)
    b = generate_dataset(kind, 50, 3, seed=7)
    assert a.points.tobytes() == b.points.tobytes()
    assert len(np.unique(a.points, axis=0)) == 50
    assert a.points.tobytes() != generate_dataset(kind, 50, 3, seed=8).points.tobytes() or kind == "line"


def test_generator_errors():
    with pytest.raises(ValueError):
        generate_dataset("spiral", 5, 2)
    with pytest.raises(ValueError):
        generate_dataset("line", 0, 2)
    with pytest.raises(ValueError):
        generate_dataset("low-dim-subspace", 5, 2, {"intrinsic": 3})


def test_two_clusters_split_by_parity():
    pts = generate_dataset("two-clusters", 20, 2, seed=1).points
    assert np.all(np.linalg.norm(pts[0::2], axis=1) <= 0.1)
    assert np.all(np.linalg.norm(pts[1::2] - [100.0, 0.0], axis=1) <= 0.1)


def test_subspace_has_smaller_expansion_than_cube():
    sub = estimate_expansion_constant(generate_dataset("low-dim-subspace", 256, 64, seed=3))
    cube = estimate_expansion_constant(generate_dataset("uniform-cube", 256, 8, seed=3))
    assert sub <= cube


def test_derive_seed_is_stable_and_spread():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    seeds = {derive_seed(0, n, t) for n in range(10) for t in range(10)}
    assert len(seeds) == 100
    assert all(0 <= s < 2**63 for s in seeds)


# -- expansion constant ------------------------------------------------------


def test_expansion_two_points():
    assert estimate_expansion_constant(np.array([[0.0], [1.0]])) == 2


def test_expansion_four_point_line():
    xs = [0, 1, 2, 3]
    assert enumerate_expansion(xs) == 3
    assert estimate_expansion_constant(np.array(xs, dtype=float)[:, None]) == 3


def test_expansion_single_point():
    assert estimate_expansion_constant(np.zeros((1, 3))) == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=2, max_size=6, unique=True))
def test_expansion_matches_enumeration(xs):
    est = estimate_expansion_constant(np.array(xs, dtype=float)[:, None])
    assert est == pytest.approx(float(enumerate_expansion(xs)), rel=1e-12)


# -- brute force -------------------------------------------------------------


def test_brute_force_examples():
    pts = np.array([[0.0], [1.0], [3.0]])
    assert brute_force_nn(pts, [2.4]) == 2
    assert brute_force_nn(pts, [0.5]) == 0
    assert brute_force_nn(pts, [0.9], exclude=1) == 0
    with pytest.raises(ValueError):
        brute_force_nn(np.zeros((0, 1)), [0.0])


def test_brute_force_agrees_with_exact_search():
    rng = np.random.default_rng(31)
    for k in range(100):
        n = int(rng.integers(2, 30))
        pts = rng.normal(size=(n, 2)) * 10
        o = StochasticOracle(pts, "exact")
        tree, _ = build(n, 0.1, o)
        qv = rng.normal(size=2) * 10
        assert find_nearest(tree, o.add_point(qv), SearchConfig(), o).nn == brute_force_nn(pts, qv)


# -- experiments -------------------------------------------------------------


def small_spec(tmp_path, **kw):
    base = dict(operation="query", generator="gaussian-mixture", n=32, dim=2, trials=4, seed=5, out=str(tmp_path))
    base.update(kw)
    return ExperimentSpec(**base)


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        ExperimentSpec(operation="sort")
    with pytest.raises(ValueError):
        ExperimentSpec(trials=0)
    with pytest.raises(ValueError):
        ExperimentSpec(operation="approx")
    with pytest.raises(FileNotFoundError):
        ExperimentSpec(input=str(tmp_path / "missing.csv"))
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict({"colour": "red"})


@pytest.mark.parametrize("operation", ["query", "build", "insert", "remove", "nngraph"])
def test_rerun_is_byte_identical(tmp_path, operation):
    kw = {"n": 16, "trials": 2, "edits": 3, "oracle": "gaussian", "t_max": 5000}
    run_experiment(small_spec(tmp_path / "a", operation=operation, **kw))
    run_experiment(small_spec(tmp_path / "b", operation=operation, **kw))
    for name in ("reports.ndjson", "summary.json", "scaling.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_workers_do_not_change_results(tmp_path):
    run_experiment(small_spec(tmp_path / "a"))
    run_experiment(small_spec(tmp_path / "b", workers=2))
    assert (tmp_path / "a" / "reports.ndjson").read_bytes() == (tmp_path / "b" / "reports.ndjson").read_bytes()


def test_summary_recomputes_from_reports(tmp_path):
    result = run_experiment(small_spec(tmp_path, n=[16, 32], queries_per_trial=3))
    records = read_reports(tmp_path / "reports.ndjson")
    assert summarize(records, "query") == result.summary
    assert json.loads((tmp_path / "summary.json").read_text()) == json.loads(json.dumps(result.summary))
    assert "scaling_ratio" in result.summary
    assert all(r["schema"] == 1 for r in records)
    assert "wall_time_ms" not in records[0]


def test_timing_only_when_asked(tmp_path):
    run_experiment(small_spec(tmp_path, trials=1), include_timing=True)
    assert "wall_time_ms" in read_reports(tmp_path / "reports.ndjson")[0]


def test_build_reports_reconcile_with_oracle():
    spec = ExperimentSpec(operation="build", generator="line", n=12, dim=1, params={"spacing": 7.3}, trials=2)
    result = run_experiment(spec)
    for rep in result.reports:
        assert rep.extra["explicit_nodes"] == 12
        assert rep.total_oracle_calls > 0
        assert sum(e["calls"] for e in rep.per_level_calls) == rep.total_oracle_calls


def test_approx_experiment_records_ratio_and_pairs(tmp_path):
    result = run_experiment(
        small_spec(tmp_path, operation="approx", generator="two-clusters", epsilon=1.0, trials=3,
                   params={"radius": 20, "separation": 1000}, query_mode="offset", jitter=100.0,
                   paired_exact=True)
    )
    for rep in result.reports:
        assert rep.extra["max_ratio"] <= 2.0 or rep.extra["correct"] == 0
        assert rep.extra["paired_exact_calls"] > 0
    assert "paired_exact_p50" in result.summary["table"][0]


def test_input_file_experiment(tmp_path):
    from bandit_cover_tree.oracle import save_csv

    save_csv(generate_dataset("uniform-cube", 20, 2, seed=2), tmp_path / "p.csv")
    spec = ExperimentSpec(operation="query", input=str(tmp_path / "p.csv"), n=20, oracle="exact", trials=3)
    assert run_experiment(spec).summary["success_rate"] == 1.0
