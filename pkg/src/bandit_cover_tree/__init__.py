"""Nearest-neighbour search through a noisy distance oracle, using cover trees and bandits."""

from .bandits import (
    BanditOutcome,
    CoverQuery,
    find_smallest_in_set,
    identify_cover,
    threshold_partition,
)
from .covertree import (
    CoverTree,
    DuplicatePointError,
    EmptyTreeError,
    PointNotFoundError,
    SearchConfig,
    SearchResult,
    build,
    check_invariants,
    find_nearest,
    find_nearest_approx,
    insert,
    remove,
)
from .harness import (
    ExperimentSpec,
    brute_force_nn,
    brute_force_nn_graph,
    estimate_expansion_constant,
    generate_dataset,
    run_experiment,
)
from .nngraph import NNGraph, build_nn_graph
from .oracle import (
    ConfidenceSchedule,
    ContractError,
    NoDataError,
    OracleConfig,
    PointSet,
    SampleLedger,
    StochasticOracle,
    load_points,
    samples_for_width,
    width,
)
from .report import RunReport

__version__ = "0.1.0"
