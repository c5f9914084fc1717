"""Optimal post-processing of noisy hierarchical count measurements.

The package turns per-node noisy linear measurements over a geocode tree
into consistent estimates: an exact best-linear-unbiased solver
(:class:`BlueSolver`), an integer-feasible heuristic
(:class:`BlueDownSolver`) and a per-node baseline
(:class:`TopDownSolver`), plus the synthetic instance generator, noise
model, evaluation harness and a file-based CLI.
"""

from .errors import (
    ConstraintError,
    CoverageError,
    DimensionError,
    GenerationError,
    HierBlueError,
    InconsistentEstimatesError,
    InfeasibleProblemError,
    RankError,
    SchemaError,
    SingularMatrixError,
    SolverError,
    UsageError,
)
from .linalg import (
    SuccinctMatrix,
    block_inverse,
    dense_pinv,
    kron_apply,
    projection_pair,
    succinct_mul,
    succinct_pinv,
    succinct_to_dense,
)
from .schema import (
    BucketSpace,
    ConstraintSet,
    GeoNode,
    GeoTree,
    InstanceSpec,
    QueryType,
    build_instance,
    census_bucket_space,
    census_query_types,
    load_instance_spec,
    node_workload,
    read_tree,
    split_constraints,
    write_tree,
)
from .noise import (
    NoisyMeasurement,
    RngState,
    measure_tree,
    read_measurements,
    sample_discrete_gaussian,
    write_measurements,
)
from .blue import (
    BlueSolver,
    Estimate,
    SolveReport,
    aggregate_children,
    combine,
    ecgls,
    gls,
    solve_tree_blue,
)
from .integer_pass import (
    BlueDownSolver,
    PassSpec,
    QPProblem,
    RoundingProblem,
    bluedown,
    census_passes,
    least_squares_pass,
    multipass,
    rounder_pass,
    weight_matrix,
)
from .evaluation import (
    MarginalQuery,
    MetricsRow,
    TopDownSolver,
    baseline_topdown,
    bias_by_bin,
    default_queries,
    error_metric,
    run_experiment,
    write_metrics_csv,
)

__version__ = "0.1.0"

__all__ = [
    "BlueSolver",
    "BlueDownSolver",
    "TopDownSolver",
    "BucketSpace",
    "ConstraintSet",
    "Estimate",
    "GeoNode",
    "GeoTree",
    "InstanceSpec",
    "MarginalQuery",
    "MetricsRow",
    "NoisyMeasurement",
    "PassSpec",
    "QPProblem",
    "QueryType",
    "RngState",
    "RoundingProblem",
    "SolveReport",
    "SuccinctMatrix",
    "aggregate_children",
    "baseline_topdown",
    "bias_by_bin",
    "block_inverse",
    "bluedown",
    "build_instance",
    "census_bucket_space",
    "census_passes",
    "census_query_types",
    "combine",
    "default_queries",
    "dense_pinv",
    "ecgls",
    "error_metric",
    "gls",
    "kron_apply",
    "least_squares_pass",
    "load_instance_spec",
    "measure_tree",
    "multipass",
    "node_workload",
    "projection_pair",
    "read_measurements",
    "read_tree",
    "rounder_pass",
    "run_experiment",
    "sample_discrete_gaussian",
    "solve_tree_blue",
    "split_constraints",
    "succinct_mul",
    "succinct_pinv",
    "succinct_to_dense",
    "weight_matrix",
    "write_measurements",
    "write_metrics_csv",
    "write_tree",
    "HierBlueError",
    "DimensionError",
    "SingularMatrixError",
    "RankError",
    "ConstraintError",
    "InconsistentEstimatesError",
    "SchemaError",
    "GenerationError",
    "InfeasibleProblemError",
    "SolverError",
    "CoverageError",
    "UsageError",
]
