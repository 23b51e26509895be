import numpy as np
import pytest

from bandit_cover_tree.covertree import SearchConfig, build, find_nearest
from bandit_cover_tree.harness import brute_force_nn_graph, generate_dataset
from bandit_cover_tree.nngraph import NNGraph, build_nn_graph
from bandit_cover_tree.oracle import ContractError, StochasticOracle


def test_three_collinear_points():
    o = StochasticOracle(np.array([[0.0], [1.0], [3.0]]), "exact")
    res = build_nn_graph(3, 0.1, o)
    assert res.graph == {0: 1, 1: 0, 2: 1}


@pytest.mark.parametrize("kind", ["uniform-cube", "gaussian-mixture", "two-clusters", "low-dim-subspace", "line"])
def test_exact_graph_equals_brute_force(kind):
    pts = generate_dataset(kind, 32, 3, seed=21)
    res = build_nn_graph(pts.n, 0.1, StochasticOracle(pts, "exact"))
    assert res.graph == brute_force_nn_graph(pts)


def test_noisy_graph_has_no_self_loops_and_splits_calls():
    pts = generate_dataset("uniform-cube", 20, 2, seed=22)
    o = StochasticOracle(pts, "gaussian", seed=5)
    res = build_nn_graph(pts.n, 0.1, o, t_max=2000)
    assert len(res.graph) == pts.n
    assert all(s != d for s, d in res.graph.edge_list())
    extra = res.report.extra
    assert extra["build_calls"] + extra["query_calls"] == res.report.total_oracle_calls == o.call_count
    assert sum(extra["per_point_query_calls"]) == extra["query_calls"]


def test_graph_rejects_tiny_inputs_and_self_loops():
    with pytest.raises(ContractError):
        build_nn_graph(1, 0.1, StochasticOracle(np.zeros((1, 1)), "exact"))
    with pytest.raises(ValueError):
        NNGraph({4: 4})


@pytest.mark.parametrize("suffix", [".csv", ".ndjson"])
def test_graph_file_round_trip(tmp_path, suffix):
    g = NNGraph({0: 2, 1: 0, 2: 0})
    g.save(tmp_path / f"g{suffix}")
    assert NNGraph.load(tmp_path / f"g{suffix}") == g


def test_ndjson_edge_format():
    assert NNGraph({1: 0, 0: 1}).to_ndjson() == '{"src":0,"dst":1}\n{"src":1,"dst":0}\n'


def test_per_point_cost_close_to_standalone_search():
    pts = generate_dataset("gaussian-mixture", 48, 2, {"spread": 1000, "std": 50}, seed=23)
    res = build_nn_graph(pts.n, 0.1, StochasticOracle(pts, "gaussian", seed=1))
    tree, _ = build(pts.n, 0.1, StochasticOracle(pts, "exact"))
    standalone = []
    for k in range(pts.n):
        o = StochasticOracle(pts, "gaussian", seed=100 + k)
        # a fresh copy of point k, searched as an outside query
        q = o.add_point(pts.points[k] + 1e-3)
        standalone.append(find_nearest(tree, q, SearchConfig(0.1 / (2 * pts.n)), o).report.total_oracle_calls)
    per_point = res.report.extra["per_point_query_calls"]
    assert np.median(per_point) <= 2 * np.median(standalone)
