"""Acceptance suite: one test (and one printed pass/fail line) per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import random
import time
from pathlib import Path

import numpy as np
import pytest

from hierblue.blue import Estimate, combine, per_node_estimates, bottom_up, solve_tree_blue
from hierblue.cli import main
from hierblue.evaluation import (
    baseline_topdown,
    default_queries,
    error_metric,
)
from hierblue.integer_pass import (
    FULL,
    QPProblem,
    RoundingProblem,
    bluedown,
    least_squares_pass,
    rounder_pass,
    weight_matrix,
)
from hierblue.linalg import SuccinctMatrix, projection_pair, succinct_mul, succinct_pinv
from hierblue.noise import measure_tree, sample_discrete_gaussian
from hierblue.schema import (
    BucketSpace,
    ConstraintPolicy,
    ConstraintSet,
    InstanceSpec,
    build_instance,
    load_instance_spec,
)

from oracles import check_moore_penrose, dense_tree_blue
from test_blue import random_structured_instance
from test_noise import _gof_pvalue
from test_schema import toy_queries

SPEC_DIR = Path(__file__).resolve().parent.parent / "specs"


def report(name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {name}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def test_oracle_equivalence_on_random_instances():
    """solve_tree_blue matches the dense whole-problem ECGLS."""
    rng = np.random.default_rng(424242)
    t0 = time.perf_counter()
    worst_z = worst_cov = 0.0
    for _ in range(50):
        tree = random_structured_instance(rng, max_nodes=15, max_buckets=6)
        ms = measure_tree(tree, int(rng.integers(0, 1 << 30)))
        solved = solve_tree_blue(tree, ms)
        oracle, blocks = dense_tree_blue(tree, ms)
        for node_id in tree.sorted_ids():
            z, zo = solved.estimates[node_id].z, oracle[node_id]
            worst_z = max(worst_z, float(np.abs(z - zo).max() / (1.0 + np.abs(zo).max())))
            cov = solved.estimates[node_id].omega_dense()
            worst_cov = max(worst_cov, float(np.abs(cov - blocks[node_id]).max()))
    elapsed = time.perf_counter() - t0
    report(
        "oracle-equivalence",
        worst_z <= 1e-7 and worst_cov <= 1e-6 and elapsed < 30.0,
        f"worst rel estimate err {worst_z:.2e}, worst cov err {worst_cov:.2e}, {elapsed:.1f}s",
    )


def test_succinct_algebra_suite():
    """200 random cases per operation against dense oracles."""
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    for _ in range(200):  # multiplication
        d = int(rng.choice([2, 3, 5]))
        k = int(rng.integers(1, 5))
        m1 = SuccinctMatrix(rng.standard_normal((k, k)), rng.standard_normal((k, k)), d)
        m2 = SuccinctMatrix(rng.standard_normal((k, k)), rng.standard_normal((k, k)), d)
        assert np.allclose(
            succinct_mul(m1, m2).to_dense(), m1.to_dense() @ m2.to_dense(), atol=1e-11
        )
    for i in range(200):  # pseudoinversion
        d = int(rng.choice([2, 3, 5]))
        k = int(rng.integers(1, 5))
        a = rng.standard_normal((k, k))
        b = rng.standard_normal((k, k))
        if i % 4 == 0:
            a[:, 0] = 0.0
        m = SuccinctMatrix(a, b, d)
        check_moore_penrose(m.to_dense(), succinct_pinv(m).to_dense(), tol=1e-9)
    for _ in range(200):  # pass weights
        ba, d = int(rng.integers(2, 4)), int(rng.choice([2, 3]))
        qa = rng.standard_normal((ba, ba))
        qb = rng.standard_normal((ba, ba))
        omega = SuccinctMatrix(qa @ qa.T + np.eye(ba), qb @ qb.T + np.eye(ba), d)
        r1 = rng.standard_normal((1, ba))
        r2 = rng.standard_normal((1, ba))
        cs = ConstraintSet(
            r1=r1, rvals1=np.zeros(d), r2=r2, rvals2=np.zeros(1),
            gineq=np.zeros((0, ba * d)), gval=np.zeros(0), sym_card=d,
        )
        alpha = float(rng.uniform(0.2, 2.0))
        dense = omega.to_dense() + alpha * cs.req.T @ cs.req
        total_w = weight_matrix(omega, cs, "total", alpha)
        assert abs(total_w - 1.0 / dense.sum()) <= 1e-9 * abs(total_w)
        full_w = weight_matrix(omega, cs, "full", alpha)
        assert np.allclose(full_w.to_dense(), np.linalg.inv(dense), atol=1e-9)
    for _ in range(200):  # constraint projections
        ba, d = 3, int(rng.choice([2, 3]))
        qa = rng.standard_normal((ba, ba))
        qb = rng.standard_normal((ba, ba))
        sigma = SuccinctMatrix(qa @ qa.T + np.eye(ba), qb @ qb.T + np.eye(ba), d)
        r1 = rng.standard_normal((int(rng.integers(0, 2)), ba))
        r2 = rng.standard_normal((1, ba))
        pair = projection_pair(sigma, r1, r2)
        dense_sigma = sigma.to_dense()
        blocks = []
        if r1.shape[0]:
            blocks.append(np.kron(r1, np.eye(d)))
        blocks.append(np.kron(r2, np.ones((1, d))))
        r = np.vstack(blocks)
        l_oracle = dense_sigma @ r.T @ np.linalg.inv(r @ dense_sigma @ r.T)
        assert np.allclose(pair.to_dense(), l_oracle, atol=1e-8)
        assert np.allclose(pair.lr_succinct().to_dense(), l_oracle @ r, atol=1e-8)
    elapsed = time.perf_counter() - t0
    report("succinct-algebra", elapsed < 10.0, f"4 x 200 cases in {elapsed:.1f}s")


def test_combine_correctness():
    """Estimator fusion vs the dense joint-GLS oracle, plus dominance."""
    rng = np.random.default_rng(99)
    worst = 0.0
    min_slack = np.inf
    for _ in range(100):
        n = int(rng.integers(1, 5))
        q1 = rng.standard_normal((n, n))
        q2 = rng.standard_normal((n, n))
        o1 = q1 @ q1.T + 0.2 * np.eye(n)
        o2 = q2 @ q2.T + 0.2 * np.eye(n)
        z1 = 10.0 * rng.standard_normal(n)
        z2 = 10.0 * rng.standard_normal(n)
        out = combine(Estimate(z=z1, omega=o1), Estimate(z=z2, omega=o2))
        joint_cov = np.linalg.inv(np.linalg.inv(o1) + np.linalg.inv(o2))
        joint_z = joint_cov @ (np.linalg.solve(o1, z1) + np.linalg.solve(o2, z2))
        worst = max(worst, float(np.abs(out.z - joint_z).max()))
        worst = max(worst, float(np.abs(out.omega_dense() - joint_cov).max()))
        for other in (o1, o2):
            min_slack = min(
                min_slack, float(np.linalg.eigvalsh(other - out.omega_dense()).min())
            )
    report(
        "combine-correctness",
        worst <= 1e-8 and min_slack >= -1e-8,
        f"worst err {worst:.2e}, dominance slack {min_slack:.2e}",
    )


def test_unbiasedness_and_variance():
    """2000 replicates on a fixed 7-node instance."""
    spec = InstanceSpec(
        seed=2025,
        level_arities=(2, 2),
        bucket_space=BucketSpace(asym_card=1, sym_card=2),
        query_types=toy_queries(1, per_level={0: 2.0, 1: 1.0, 2: 1.0}),
        constraint_policy=ConstraintPolicy(
            zero_rate=0.0, count_mean=30.0, exact_total_levels=(0,)
        ),
    )
    tree = build_instance(spec)
    assert len(tree.nodes) == 7
    n_rep = 2000
    draws = {i: [] for i in tree.sorted_ids()}
    cov = None
    for rep in range(n_rep):
        solved = solve_tree_blue(tree, measure_tree(tree, 50_000 + rep))
        for node_id in tree.sorted_ids():
            draws[node_id].append(solved.estimates[node_id].z)
        if cov is None:
            cov = {i: solved.estimates[i].omega_dense() for i in tree.sorted_ids()}
    worst_sigmas = 0.0
    worst_frob = 0.0
    for node_id in tree.sorted_ids():
        arr = np.asarray(draws[node_id])
        mean_err = arr.mean(axis=0) - tree.nodes[node_id].truth
        band = np.sqrt(np.maximum(np.diag(cov[node_id]), 1e-12) / n_rep)
        worst_sigmas = max(worst_sigmas, float(np.abs(mean_err / band).max()))
        emp = np.cov(arr.T, bias=False).reshape(cov[node_id].shape)
        denom = max(float(np.linalg.norm(cov[node_id])), 1e-12)
        worst_frob = max(worst_frob, float(np.linalg.norm(emp - cov[node_id]) / denom))
    report(
        "unbiasedness-and-variance",
        worst_sigmas <= 4.0 and worst_frob <= 0.15,
        f"worst |mean err| {worst_sigmas:.2f} sigma, worst cov gap {100 * worst_frob:.1f}%",
    )


@pytest.fixture(scope="module")
def toy_census():
    spec = load_instance_spec(SPEC_DIR / "toy_census.toml")
    tree = build_instance(spec)
    return spec, tree


def test_feasibility_of_integer_outputs(toy_census):
    """Integral, nonnegative, and exactly feasible outputs everywhere."""
    spec, tree = toy_census
    ok = True
    detail = ""
    for algorithm, solver in (("bluedown", bluedown), ("topdown", baseline_topdown)):
        report_obj = solver(tree, measure_tree(tree, 31337))
        for node_id in tree.sorted_ids():
            z = report_obj.estimates[node_id].z
            node = tree.nodes[node_id]
            cs = node.constraints
            checks = [
                np.array_equal(z, np.round(z)),
                np.all(z >= 0),
                (not cs.n_equalities) or np.array_equal(cs.req @ z, cs.rval),
                (not cs.gineq.shape[0]) or np.all(cs.gineq @ z <= cs.gval),
                (not node.children)
                or np.array_equal(sum(report_obj.estimates[c].z for c in node.children), z),
            ]
            if not all(checks):
                ok = False
                detail = f"{algorithm} violates feasibility at {node_id}"
                break
    report("integer-feasibility", ok, detail or "bluedown + topdown exactly feasible")


def test_integer_stage_optimality():
    """Rounder equals exhaustive enumeration; QP KKT residuals small."""
    rng = np.random.default_rng(4242)
    worst_gap = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 7))  # two children -> up to 12 binaries
        parent = rng.integers(0, 6, size=n).astype(float)
        a = np.clip(parent * rng.uniform(0, 1, size=n) + rng.uniform(-0.4, 0.4, size=n), 0, None)
        frac = {"a": np.minimum(a, parent), "b": None}
        frac["b"] = parent - frac["a"]
        problem = RoundingProblem(
            children=("a", "b"),
            fractional={k: v.copy() for k, v in frac.items()},
            constraints={"a": ConstraintSet.empty(n, 1), "b": ConstraintSet.empty(n, 1)},
            q_kind=FULL,
            n=n,
            parent_value=parent,
        )
        out = rounder_pass(problem)
        got_cost = sum(float(np.abs(frac[k] - out[k]).sum()) for k in ("a", "b"))
        base_a = np.floor(frac["a"] + 1e-6)
        base_b = np.floor(frac["b"] + 1e-6)
        fa, fb = frac["a"] - base_a, frac["b"] - base_b
        c = parent - base_a - base_b
        best = np.inf
        for code in range(1 << (2 * n)):
            y = np.array([(code >> i) & 1 for i in range(2 * n)], dtype=float)
            if not np.allclose(y[:n] + y[n:], c):
                continue
            best = min(best, float(np.abs(fa - y[:n]).sum() + np.abs(fb - y[n:]).sum()))
        worst_gap = max(worst_gap, abs(got_cost - best))

    rng = np.random.default_rng(777)
    worst_kkt = 0.0
    for _ in range(20):
        tree = random_structured_instance(rng, max_nodes=15, max_buckets=6)
        ms = measure_tree(tree, int(rng.integers(0, 1 << 30)))
        up = bottom_up(tree, per_node_estimates(tree, ms))
        solved = solve_tree_blue(tree, ms)
        parents = tree.internal_ids_by_depth()
        parent = parents[int(rng.integers(0, len(parents)))]
        children = sorted(tree.nodes[parent].children)
        problem = QPProblem(
            children=tuple(children),
            targets={c: up[c].z for c in children},
            weights={
                c: weight_matrix(up[c].omega, tree.nodes[c].constraints, FULL, 1.0)
                for c in children
            },
            constraints={c: tree.nodes[c].constraints for c in children},
            q_kind=FULL,
            n=tree.bucket_space.size,
            parent_value=np.round(solved.estimates[parent].z),
        )
        least_squares_pass(problem)
        diag = problem.last_diagnostics
        worst_kkt = max(worst_kkt, diag.kkt_stationarity, diag.kkt_complementarity)
    report(
        "integer-stage-optimality",
        worst_gap <= 1e-9 and worst_kkt <= 1e-7,
        f"worst rounder gap {worst_gap:.2e}, worst KKT residual {worst_kkt:.2e}",
    )


def test_equivalence_under_inactive_constraints():
    """Fractional multipass equals the exact tree BLUE when no inequality
    binds (single full pass per level, where the equivalence is exact)."""
    rng = np.random.default_rng(11)
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < 5 and attempts < 60:
        attempts += 1
        spec = InstanceSpec(
            seed=int(rng.integers(0, 1 << 30)),
            level_arities=(2, 3),
            bucket_space=BucketSpace(asym_card=3, sym_card=2),
            query_types=toy_queries(3),
            constraint_policy=ConstraintPolicy(
                zero_rate=0.35, count_mean=300.0, exact_total_levels=(0, 1)
            ),
        )
        tree = build_instance(spec)
        ms = measure_tree(tree, int(rng.integers(0, 1 << 30)))
        blue = solve_tree_blue(tree, ms)
        if min(blue.estimates[i].z.min() for i in tree.sorted_ids()) < 0:
            continue  # a nonnegativity bound binds; premise does not hold
        checked += 1
        frac = bluedown(tree, ms, passes=[(FULL,)] * tree.n_levels, round_output=False)
        for node_id in tree.sorted_ids():
            scale = 1.0 + float(np.abs(blue.estimates[node_id].z).max())
            worst = max(
                worst,
                float(np.abs(frac.estimates[node_id].z - blue.estimates[node_id].z).max())
                / scale,
            )
    report(
        "equivalence-inactive-constraints",
        checked >= 5 and worst <= 1e-7,
        f"{checked} instances, worst relative gap {worst:.2e}",
    )


def test_qualitative_improvement(toy_census):
    """Monte Carlo analog of the production accuracy comparison."""
    spec, tree = toy_census
    queries = default_queries(spec.bucket_space)
    t0 = time.perf_counter()
    sums = {}
    for rep in range(10):
        ms = measure_tree(tree, 5000 + rep)
        solved = {
            "bluedown": bluedown(tree, ms).estimates,
            "topdown": baseline_topdown(tree, ms).estimates,
        }
        for level in (1, 2):
            for q in queries:
                for algorithm, estimates in solved.items():
                    key = (level, q.name, algorithm)
                    sums[key] = sums.get(key, 0.0) + error_metric(estimates, tree, q, level)
    elapsed = time.perf_counter() - t0
    wins = 0
    cells = 0
    strict_ok = True
    lines = []
    for level in (1, 2):
        for q in queries:
            cells += 1
            eb = sums[(level, q.name, "bluedown")] / 10.0
            et = sums[(level, q.name, "topdown")] / 10.0
            if eb <= et:
                wins += 1
            if q.name in ("total", "asym_marginal") and not eb < et:
                strict_ok = False
            lines.append(f"L{level} {q.name}: {eb:.3f} vs {et:.3f}")
    ok = wins >= int(np.ceil(0.7 * cells)) and strict_ok and elapsed < 300.0
    report(
        "qualitative-improvement",
        ok,
        f"{wins}/{cells} cells, strict on totals+housing {strict_ok}, "
        f"{elapsed:.0f}s; " + "; ".join(lines),
    )


def test_discrete_gaussian_sampler_gof():
    """Chi-square goodness of fit against the directly normalized PMF."""
    t0 = time.perf_counter()
    worst_p = 1.0
    for sigma2 in (0.5, 1.0, 4.0):
        rng = random.Random(1000 + int(10 * sigma2))
        samples = [sample_discrete_gaussian(0, sigma2, rng) for _ in range(100_000)]
        worst_p = min(worst_p, _gof_pvalue(samples, sigma2))
    elapsed = time.perf_counter() - t0
    report(
        "discrete-gaussian-gof",
        worst_p > 0.001 and elapsed < 5.0,
        f"min p-value {worst_p:.4f}, {elapsed:.1f}s",
    )


def test_end_to_end_determinism(tmp_path):
    """Two full CLI pipeline runs produce byte-identical outputs."""
    spec = str(SPEC_DIR / "smoke.toml")
    outputs = []
    for tag in ("1", "2"):
        tree = tmp_path / f"tree{tag}"
        nmf = tmp_path / f"nmf{tag}"
        est = tmp_path / f"est{tag}"
        metrics = tmp_path / f"metrics{tag}"
        assert main(["generate", "--spec", spec, "--out", str(tree)]) == 0
        assert main(["measure", "--spec", spec, "--tree", str(tree), "--out", str(nmf)]) == 0
        assert (
            main(
                ["solve", "--spec", spec, "--tree", str(tree), "--nmf", str(nmf),
                 "--algo", "bluedown", "--out", str(est)]
            )
            == 0
        )
        assert (
            main(
                ["evaluate", "--spec", spec, "--replicates", "2",
                 "--algo", "topdown,bluedown", "--out", str(metrics)]
            )
            == 0
        )
        outputs.append(tuple(p.read_bytes() for p in (tree, nmf, est, metrics)))
    report(
        "end-to-end-determinism",
        outputs[0] == outputs[1],
        "generate/measure/solve/evaluate byte-identical across runs",
    )
