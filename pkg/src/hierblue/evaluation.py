"""Baseline solver, error metrics, bias metrics and the replicate harness.

The baseline runs the same multipass descent as the integer solver but
feeds it the raw per-node estimates instead of the bottom-up fused ones,
so each node's starting point sees only its own measurements.
"""

import concurrent.futures
import os
from dataclasses import dataclass
from statistics import median

import numpy as np
from sklearn.base import BaseEstimator

from .blue import per_node_estimates, solve_tree_blue
from .errors import CoverageError, HierBlueError, SchemaError
from .integer_pass import bluedown, descend_multipass
from .noise import measure_tree
from .schema import build_instance

BASELINE_ALGORITHM = "topdown"
_ALGORITHMS = ("blue", "bluedown", "topdown")


@dataclass(frozen=True)
class MarginalQuery:
    """A partial-aggregate query: 0/1 rows over the bucket space."""

    name: str
    selector: np.ndarray

    def __post_init__(self):
        sel = np.asarray(self.selector, dtype=float)
        if sel.ndim != 2:
            raise SchemaError("selector must be 2-d")
        if not np.all((sel == 0) | (sel == 1)):
            raise SchemaError("selector rows must be 0/1 aggregation indicators")
        sel = sel.copy()
        sel.setflags(write=False)
        object.__setattr__(self, "selector", sel)


def default_queries(bucket_space):
    """Total, each asymmetric marginal, each symmetric marginal, detailed."""
    ba, d = bucket_space.asym_card, bucket_space.sym_card
    n = ba * d
    asym = np.kron(np.eye(ba), np.ones((1, d)))
    sym = np.kron(np.ones((1, ba)), np.eye(d))
    return [
        MarginalQuery("total", np.ones((1, n))),
        MarginalQuery("asym_marginal", asym),
        MarginalQuery("sym_marginal", sym),
        MarginalQuery("detailed", np.eye(n)),
    ]


def baseline_topdown(tree, measurements, passes=None, alpha=1.0, round_output=True,
                     covariance_mode="auto"):
    """Multipass descent from raw per-node estimates (the baseline).

    The root is solved from its own measurement; every sibling group is
    fitted toward its members' per-node estimates under the full
    constraint systems.  Output satisfies the same feasibility contract as
    the integer solver.
    """
    node_est = per_node_estimates(tree, measurements, covariance_mode)
    return descend_multipass(
        tree,
        node_est,
        passes=passes,
        alpha=alpha,
        round_output=round_output,
        algorithm=BASELINE_ALGORITHM,
    )


class TopDownSolver(BaseEstimator):
    """Baseline solver with the same surface as the integer solver."""

    def __init__(self, passes=None, alpha=1.0, round_output=True, covariance_mode="auto"):
        self.passes = passes
        self.alpha = alpha
        self.round_output = round_output
        self.covariance_mode = covariance_mode

    def fit(self, tree, measurements=None):
        if measurements is None:
            measurements = measure_tree(tree, 0)
        self.report_ = baseline_topdown(
            tree,
            measurements,
            passes=self.passes,
            alpha=self.alpha,
            round_output=self.round_output,
            covariance_mode=self.covariance_mode,
        )
        self.estimates_ = self.report_.estimates
        return self

    def predict(self, node_ids):
        if isinstance(node_ids, str):
            return self.estimates_[node_ids].z
        return np.vstack([self.estimates_[i].z for i in node_ids])


def error_metric(estimates, tree, query, level):
    """Mean L1 error of a marginal query over all nodes at one level."""
    nodes = tree.nodes_at_level(level)
    if not nodes:
        raise CoverageError(f"no nodes at level {level}")
    total = 0.0
    for node in nodes:
        if node.id not in estimates:
            raise CoverageError(f"estimates missing node {node.id}")
        diff = query.selector @ (estimates[node.id].z - node.truth)
        total += float(np.abs(diff).sum())
    return total / len(nodes)


def signed_error(estimates, tree, query, level):
    """Mean signed per-row error of a marginal query at one level."""
    nodes = tree.nodes_at_level(level)
    total = 0.0
    for node in nodes:
        diff = query.selector @ (estimates[node.id].z - node.truth)
        total += float(diff.mean())
    return total / len(nodes)


def default_population_bins(tree, level):
    """Power-of-ten bin edges scaled to the level's population range."""
    totals = [float(n.truth.sum()) for n in tree.nodes_at_level(level)]
    top = max(totals) if totals else 1.0
    edges = [0.0, 10.0]
    while edges[-1] <= top:
        edges.append(edges[-1] * 10.0)
    return edges


def _bin_label(lo, hi):
    return f"[{int(lo)}-{int(hi)})" if np.isfinite(hi) else f"[{int(lo)}-inf)"


def bias_by_bin(estimates, tree, level, bins):
    """Signed mean total error per population bin at one level.

    ``bins`` are ascending edges partitioning the population range; each
    node falls in the half-open bin containing its true total.
    """
    edges = list(bins) + [np.inf]
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        errors = []
        for node in tree.nodes_at_level(level):
            true_total = float(node.truth.sum())
            if lo <= true_total < hi:
                errors.append(float(estimates[node.id].z.sum()) - true_total)
        if errors:
            out.append((_bin_label(lo, hi), float(np.mean(errors))))
    return out


@dataclass(frozen=True)
class MetricsRow:
    """One metrics record; ``pop_bin`` is empty for whole-level cells."""

    replicate: int
    algorithm: str
    level: int
    query: str
    raw_l1: float
    normalized: float
    bias: float
    pop_bin: str = ""


def _solve(algorithm, tree, measurements, passes, alpha):
    if algorithm == "blue":
        return solve_tree_blue(tree, measurements)
    if algorithm == "bluedown":
        return bluedown(tree, measurements, passes=passes, alpha=alpha)
    if algorithm == BASELINE_ALGORITHM:
        return baseline_topdown(tree, measurements, passes=passes, alpha=alpha)
    raise SchemaError(f"unknown algorithm {algorithm!r}; expected one of {_ALGORITHMS}")


def _worker_count():
    raw = os.environ.get("HIERBLUE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_experiment(
    spec,
    n_replicates,
    algorithms,
    queries=None,
    levels=None,
    bias_levels=None,
    bins=None,
    passes=None,
    alpha=1.0,
):
    """Measure/solve/score ``n_replicates`` times; returns (rows, failures).

    Replicate ``k`` samples its noise from seed ``spec.seed + 1000 * (k+1)``
    over the instance built from ``spec``; the whole run is a pure function
    of the spec and the replicate count.  Failures are recorded per
    (replicate, algorithm) rather than aborting the run.
    """
    if n_replicates < 1:
        raise SchemaError("need at least one replicate")
    tree = build_instance(spec)
    queries = list(queries) if queries is not None else default_queries(spec.bucket_space)
    levels = list(levels) if levels is not None else list(range(tree.n_levels))
    if bias_levels is None:
        bias_levels = [lvl for lvl in levels if 0 < lvl < tree.n_levels - 1] or levels[:1]
    pass_config = passes if passes is not None else tree.passes_per_level

    def one_replicate(k):
        seed = spec.seed + 1000 * (k + 1)
        measurements = measure_tree(tree, seed)
        results, errors = {}, {}
        for algorithm in algorithms:
            try:
                results[algorithm] = _solve(
                    algorithm, tree, measurements, pass_config, alpha
                ).estimates
            except HierBlueError as exc:
                errors[algorithm] = f"{type(exc).__name__}: {exc}"
        return k, results, errors

    workers = _worker_count()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one_replicate, range(n_replicates)))
    else:
        outcomes = [one_replicate(k) for k in range(n_replicates)]

    failures = []
    raw_cells = {}  # (algorithm, level, query, bin) -> {replicate: (raw, bias)}
    for k, results, errors in outcomes:
        for algorithm, message in errors.items():
            failures.append((k, algorithm, message))
        for algorithm, estimates in results.items():
            for level in levels:
                for query in queries:
                    raw = error_metric(estimates, tree, query, level)
                    bias = signed_error(estimates, tree, query, level)
                    raw_cells.setdefault((algorithm, level, query.name, ""), {})[k] = (
                        raw,
                        bias,
                    )
            for level in bias_levels:
                edges = bins if bins is not None else default_population_bins(tree, level)
                for label, value in bias_by_bin(estimates, tree, level, edges):
                    per_bin = _bin_error_by_bin(estimates, tree, level, edges)
                    raw_cells.setdefault((algorithm, level, "total", label), {})[k] = (
                        per_bin[label],
                        value,
                    )

    rows = []
    medians = {}
    baseline = BASELINE_ALGORITHM if BASELINE_ALGORITHM in algorithms else algorithms[0]
    for (algorithm, level, qname, bin_label), per_rep in sorted(raw_cells.items()):
        if algorithm != baseline:
            continue
        medians[(level, qname, bin_label)] = median(v[0] for v in per_rep.values())
    for (algorithm, level, qname, bin_label), per_rep in sorted(raw_cells.items()):
        denom = medians.get((level, qname, bin_label), 0.0)
        for k in sorted(per_rep):
            raw, bias = per_rep[k]
            if denom > 1e-9:
                normalized = raw / denom
            else:
                # a zero baseline median: errors at float-dust level count
                # as exact zeros rather than as infinitely worse
                normalized = 1.0 if raw <= 1e-9 else float("inf")
            rows.append(
                MetricsRow(
                    replicate=k,
                    algorithm=algorithm,
                    level=level,
                    query=qname,
                    raw_l1=raw,
                    normalized=normalized,
                    bias=bias,
                    pop_bin=bin_label,
                )
            )
    rows.sort(key=lambda r: (r.replicate, r.algorithm, r.level, r.query, r.pop_bin))
    return rows, failures


def _bin_error_by_bin(estimates, tree, level, edges):
    full = list(edges) + [np.inf]
    out = {}
    for lo, hi in zip(full[:-1], full[1:]):
        errs = []
        for node in tree.nodes_at_level(level):
            true_total = float(node.truth.sum())
            if lo <= true_total < hi:
                errs.append(abs(float(estimates[node.id].z.sum()) - true_total))
        if errs:
            out[_bin_label(lo, hi)] = float(np.mean(errs))
    return out


CSV_HEADER = "replicate,algorithm,level,query,raw_l1,normalized,bias,pop_bin"


def _fmt(x):
    return f"{x:.17g}"


def write_metrics_csv(rows, path):
    """UTF-8, LF, 17-significant-digit reals; deterministic given the rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r.replicate},{r.algorithm},{r.level},{r.query},"
                f"{_fmt(r.raw_l1)},{_fmt(r.normalized)},{_fmt(r.bias)},{r.pop_bin}\n"
            )


def read_metrics_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise SchemaError(f"unexpected metrics header: {header!r}")
        for line in fh:
            if not line.strip():
                continue
            rep, algo, level, query, raw, norm, bias, bin_label = line.rstrip("\n").split(",")
            rows.append(
                MetricsRow(
                    replicate=int(rep),
                    algorithm=algo,
                    level=int(level),
                    query=query,
                    raw_l1=float(raw),
                    normalized=float(norm),
                    bias=float(bias),
                    pop_bin=bin_label,
                )
            )
    return rows


def summarize_metrics(rows):
    """Mean raw/normalized/bias per (algorithm, level, query, bin) cell."""
    cells = {}
    for r in rows:
        cells.setdefault((r.algorithm, r.level, r.query, r.pop_bin), []).append(r)
    out = []
    for key in sorted(cells):
        group = cells[key]
        out.append(
            {
                "algorithm": key[0],
                "level": key[1],
                "query": key[2],
                "pop_bin": key[3],
                "mean_raw_l1": float(np.mean([g.raw_l1 for g in group])),
                "mean_normalized": float(np.mean([g.normalized for g in group])),
                "mean_bias": float(np.mean([g.bias for g in group])),
                "replicates": len(group),
            }
        )
    return out
