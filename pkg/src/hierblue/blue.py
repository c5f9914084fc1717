"""Best-linear-unbiased machinery: per-node ECGLS, estimator fusion and the
two-pass tree solver.

The solver touches every node three times: a per-node equality-constrained
GLS, a bottom-up pass fusing each node with the sum of its children's
subtree estimates, and a top-down pass fusing each node's subtree estimate
with the information held by the rest of the tree.  All covariances stay
in succinct form on structured instances.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import (
    ConstraintError,
    DimensionError,
    InconsistentEstimatesError,
    RankError,
    UsageError,
)
from .linalg import (
    SuccinctMatrix,
    dense_pinv,
    kron_apply,
    projection_pair,
    symmetrized,
)
from .noise import measure_tree, measurements_by_node
from .schema import NodeWorkload, node_workload

# Tolerance of the range-membership test guarding estimator fusion.
RANGE_TOL = 1e-6


@dataclass(frozen=True)
class Estimate:
    """A value vector over buckets with its covariance.

    ``omega`` is a SuccinctMatrix on structured paths, a dense array
    otherwise, or None for integral outputs that carry no covariance.
    """

    z: np.ndarray
    omega: object = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel().copy()
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    def omega_dense(self):
        if self.omega is None:
            raise UsageError("estimate carries no covariance")
        if isinstance(self.omega, SuccinctMatrix):
            return self.omega.to_dense()
        return np.asarray(self.omega, dtype=float)

    def min_covariance_eigenvalue(self):
        if self.omega is None:
            return 0.0
        if isinstance(self.omega, SuccinctMatrix):
            return self.omega.min_eigenvalue()
        return float(np.linalg.eigvalsh(symmetrized(self.omega)).min())


@dataclass
class SolveReport:
    """Per-node estimates plus pass timings and numerical diagnostics."""

    estimates: dict
    integral: bool = False
    timings: dict = field(default_factory=dict)
    max_constraint_residual: float = 0.0
    min_covariance_eigenvalue: float = 0.0
    algorithm: str = "blue"

    def values(self, node_id):
        return self.estimates[node_id].z


def _as_variances(sigma, m):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        if not np.allclose(sigma, np.diag(np.diag(sigma))):
            raise DimensionError("dense noise covariance must be diagonal")
        sigma = np.diag(sigma)
    if sigma.size != m:
        raise DimensionError(f"expected {m} per-row variances, got {sigma.size}")
    if np.any(sigma <= 0):
        raise DimensionError("noise variances must be strictly positive")
    return sigma


def gls(w, sigma, y):
    """Generalized least squares estimate and covariance.

    Structured path: ``w`` is a NodeWorkload, ``sigma`` is None (variances
    travel with the workload) and ``y`` is the pair (y1, y2); the returned
    covariance is succinct with components
    ``A = (W1' S1i W1)^-1`` and ``B = (W1' S1i W1 + d W2' S2i W2)^-1``.

    Dense path: ``w`` is the workload matrix, ``sigma`` its diagonal noise
    variances (vector or diagonal matrix) and ``y`` the observation vector.
    """
    if isinstance(w, NodeWorkload):
        return _gls_structured(w, y)
    w = np.asarray(w, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    variances = _as_variances(sigma, w.shape[0])
    if np.linalg.matrix_rank(w, tol=1e-10) < w.shape[1]:
        raise RankError("workload lacks full column rank")
    wtsi = w.T / variances
    cov = np.linalg.inv(wtsi @ w)
    cov = symmetrized(cov)
    return Estimate(z=cov @ (wtsi @ y), omega=cov)


def _gls_structured(workload, y):
    y1, y2 = y
    y1 = np.asarray(y1, dtype=float).ravel()
    y2 = np.asarray(y2, dtype=float).ravel()
    d = workload.sym_card
    w1, w2 = workload.w1, workload.w2
    if y1.size != w1.shape[0] * d or y2.size != w2.shape[0]:
        raise DimensionError("measurement lengths do not match the workload")
    a_info = (w1.T / workload.var1) @ w1
    b_info = a_info + (d * (w2.T / workload.var2) @ w2 if w2.shape[0] else 0.0)
    try:
        a = np.linalg.inv(a_info)
        b = np.linalg.inv(b_info)
    except np.linalg.LinAlgError as exc:
        raise RankError(f"structured workload is rank-deficient: {exc}") from exc
    cov = SuccinctMatrix(symmetrized(a), symmetrized(b), d).symmetrized()
    score = kron_apply(w1.T / workload.var1, np.eye(d), y1)
    if w2.shape[0]:
        score = score + kron_apply(w2.T / workload.var2, np.ones((d, 1)), y2)
    return Estimate(z=cov.matvec(score), omega=cov)


def apply_structured_constraints(r1, r2, d, x):
    """Evaluate ``[r1 (x) I; r2 (x) 1^T] x`` without materializing."""
    parts = []
    if r1.shape[0]:
        parts.append(kron_apply(r1, np.eye(d), x))
    if r2.shape[0]:
        parts.append(kron_apply(r2, np.ones((1, d)), x))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def ecgls(w, sigma, y, constraints=None):
    """Equality-constrained GLS: project the GLS solution onto ``R x = r``.

    With ``L = Sigma_gls R' (R Sigma_gls R')^{-1}`` the estimate becomes
    ``x_gls - L (R x_gls - r)`` with covariance ``(I - L R) Sigma_gls``.
    On the structured path the projection factors come from
    :func:`hierblue.linalg.projection_pair`.
    """
    est = gls(w, sigma, y)
    if constraints is None or constraints.is_empty or constraints.n_equalities == 0:
        return est
    if isinstance(est.omega, SuccinctMatrix):
        return _ecgls_structured(est, constraints)
    return _ecgls_dense(est, constraints.req, constraints.rval)


def _ecgls_dense(est, req, rval):
    cov = est.omega_dense()
    rsr = req @ cov @ req.T
    try:
        gain = cov @ req.T @ np.linalg.inv(rsr)
    except np.linalg.LinAlgError as exc:
        raise ConstraintError(f"constraint system is rank-deficient: {exc}") from exc
    z = est.z - gain @ (req @ est.z - rval)
    cov = symmetrized((np.eye(cov.shape[0]) - gain @ req) @ cov)
    return Estimate(z=z, omega=cov)


def _ecgls_structured(est, constraints):
    r1, r2, v1, v2 = (
        constraints.r1,
        constraints.r2,
        constraints.rvals1,
        constraints.rvals2,
    )
    d = constraints.sym_card
    pair = projection_pair(est.omega, r1, r2)
    residual1 = kron_apply(r1, np.eye(d), est.z) - v1 if r1.shape[0] else np.zeros(0)
    residual2 = (
        kron_apply(r2, np.ones((1, d)), est.z) - v2 if r2.shape[0] else np.zeros(0)
    )
    z = est.z - pair.apply(residual1, residual2)
    lr = pair.lr_succinct()
    eye = SuccinctMatrix.identity(est.omega.a.shape[0], d)
    cov = ((eye - lr) @ est.omega).symmetrized()
    return Estimate(z=z, omega=cov)


def _range_violation(pi, pi_pinv, delta):
    if isinstance(pi, SuccinctMatrix):
        residual = delta - pi.matvec(pi_pinv.matvec(delta))
    else:
        residual = delta - pi @ (pi_pinv @ delta)
    return float(np.linalg.norm(residual))


def combine(e1, e2):
    """Fuse two independent estimates of the same quantity into their BLUE.

    With ``A = Omega2 (Omega1 + Omega2)^+`` and ``B = I - A`` the result is
    ``A z1 + B z2`` with covariance ``B Omega2``.  The difference
    ``z1 - z2`` must lie in the range of ``Omega1 + Omega2``; a violation
    beyond tolerance signals incompatible constraints between the inputs.
    """
    if e1.z.size != e2.z.size:
        raise DimensionError("estimates have different dimensions")
    delta = e1.z - e2.z
    succinct = isinstance(e1.omega, SuccinctMatrix) and isinstance(
        e2.omega, SuccinctMatrix
    )
    if succinct:
        total = (e1.omega + e2.omega).symmetrized()
        total_pinv = total.pinv()
        violation = _range_violation(total, total_pinv, delta)
    else:
        o1 = e1.omega_dense()
        o2 = e2.omega_dense()
        total = symmetrized(o1 + o2)
        total_pinv = dense_pinv(total)
        violation = _range_violation(total, total_pinv, delta)
    if violation > RANGE_TOL * (1.0 + float(np.linalg.norm(delta))):
        raise InconsistentEstimatesError(
            f"estimates disagree in a zero-variance direction (residual {violation:.3e})"
        )
    if succinct:
        gain = e2.omega @ total_pinv
        z = gain.matvec(delta) + e2.z
        eye = SuccinctMatrix.identity(gain.a.shape[0], gain.d)
        cov = ((eye - gain) @ e2.omega).symmetrized()
        return Estimate(z=z, omega=cov)
    gain = o2 @ total_pinv
    z = e2.z + gain @ delta
    cov = symmetrized((np.eye(gain.shape[0]) - gain) @ o2)
    return Estimate(z=z, omega=cov)


def aggregate_children(estimates):
    """Sum independent sibling estimates (values and covariances)."""
    if not estimates:
        raise UsageError("need at least one child estimate")
    first = estimates[0]
    z = first.z.copy()
    omega = first.omega
    for est in estimates[1:]:
        if est.z.size != z.size:
            raise DimensionError("child estimates have different dimensions")
        z = z + est.z
        if isinstance(omega, SuccinctMatrix) and isinstance(est.omega, SuccinctMatrix):
            omega = omega + est.omega
        else:
            omega = (
                (omega.to_dense() if isinstance(omega, SuccinctMatrix) else omega)
                + est.omega_dense()
            )
    return Estimate(z=z, omega=omega)


def _coerce_estimate(est, mode):
    if mode == "dense" and isinstance(est.omega, SuccinctMatrix):
        return Estimate(z=est.z, omega=est.omega.to_dense())
    return est


def per_node_estimates(tree, measurements, covariance_mode="auto"):
    """Run the per-node ECGLS stage for every node.

    ``covariance_mode`` is "auto" (succinct when the symmetric dimension
    exceeds one) or "dense".
    """
    by_node = measurements_by_node(measurements)
    missing = [i for i in tree.sorted_ids() if i not in by_node]
    if missing:
        raise UsageError(f"measurements missing for nodes {missing[:5]}")
    d = tree.bucket_space.sym_card
    use_dense = covariance_mode == "dense" or d == 1
    out = {}
    for node_id in tree.sorted_ids():
        node = tree.nodes[node_id]
        workload = node_workload(tree, node)
        m = by_node[node_id]
        try:
            if use_dense:
                w = workload.to_dense()
                variances = workload.dense_variances()
                y = np.concatenate([m.y1, m.y2])
                est = ecgls(w, variances, y, node.constraints)
            else:
                est = ecgls(workload, None, (m.y1, m.y2), node.constraints)
        except (ConstraintError, RankError) as exc:
            raise type(exc)(f"node {node_id}: {exc}") from exc
        out[node_id] = est
    return out


def bottom_up(tree, node_estimates):
    """Fuse each node with the aggregated estimates of its subtree.

    Returns the subtree estimates keyed by node, where a leaf's subtree
    estimate is its per-node one.
    """
    up = {}
    for node_id in sorted(
        tree.sorted_ids(), key=lambda i: (-tree.nodes[i].level, i)
    ):
        node = tree.nodes[node_id]
        if node.is_leaf:
            up[node_id] = node_estimates[node_id]
            continue
        children = [up[c] for c in sorted(node.children)]
        pooled = aggregate_children(children)
        try:
            up[node_id] = combine(node_estimates[node_id], pooled)
        except InconsistentEstimatesError as exc:
            raise InconsistentEstimatesError(f"node {node_id}: {exc}") from exc
    return up


def solve_tree_blue(tree, measurements, covariance_mode="auto"):
    """Compute the BLUE of every node's counts given all measurements.

    Per-node covariances in the report are the block-diagonal part of the
    full-problem covariance; cross-node blocks are never formed.
    """
    timings = {}
    t0 = time.perf_counter()
    node_est = per_node_estimates(tree, measurements, covariance_mode)
    timings["per_node"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    up = bottom_up(tree, node_est)
    timings["bottom_up"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    final = {}
    down = {}
    root = tree.root_id
    final[root] = up[root]
    down[root] = node_est[root]
    order = sorted(
        (i for i in tree.sorted_ids() if i != root),
        key=lambda i: (tree.nodes[i].level, i),
    )
    # sibling aggregates are shared across the children of one parent
    sibling_sum = {}
    for parent_id in tree.internal_ids_by_depth():
        children = sorted(tree.nodes[parent_id].children)
        sibling_sum[parent_id] = aggregate_children([up[c] for c in children])
    for node_id in order:
        parent = tree.nodes[node_id].parent
        pooled = sibling_sum[parent]
        rest = Estimate(
            z=down[parent].z - pooled.z + up[node_id].z,
            omega=_add_sub_cov(down[parent].omega, pooled.omega, up[node_id].omega),
        )
        try:
            down[node_id] = combine(node_est[node_id], rest)
            final[node_id] = combine(up[node_id], rest)
        except InconsistentEstimatesError as exc:
            raise InconsistentEstimatesError(f"node {node_id}: {exc}") from exc
    timings["top_down"] = time.perf_counter() - t0

    report = SolveReport(estimates=final, integral=False, timings=timings)
    report.max_constraint_residual = _max_constraint_residual(tree, final)
    report.min_covariance_eigenvalue = min(
        (final[i].min_covariance_eigenvalue() for i in final), default=0.0
    )
    return report


def _add_sub_cov(cov_down, cov_pooled, cov_up):
    if (
        isinstance(cov_down, SuccinctMatrix)
        and isinstance(cov_pooled, SuccinctMatrix)
        and isinstance(cov_up, SuccinctMatrix)
    ):
        return (cov_down + cov_pooled - cov_up).symmetrized()
    dn = cov_down.to_dense() if isinstance(cov_down, SuccinctMatrix) else cov_down
    pl = cov_pooled.to_dense() if isinstance(cov_pooled, SuccinctMatrix) else cov_pooled
    uo = cov_up.to_dense() if isinstance(cov_up, SuccinctMatrix) else cov_up
    return symmetrized(dn + pl - uo)


def _max_constraint_residual(tree, estimates):
    worst = 0.0
    for node_id, est in estimates.items():
        cs = tree.nodes[node_id].constraints
        if cs.n_equalities:
            resid = apply_structured_constraints(cs.r1, cs.r2, cs.sym_card, est.z)
            worst = max(worst, float(np.abs(resid - cs.rval).max()))
    for node_id in tree.internal_ids_by_depth():
        node = tree.nodes[node_id]
        total = sum(estimates[c].z for c in node.children)
        worst = max(worst, float(np.abs(total - estimates[node_id].z).max()))
    return worst


class BlueSolver(BaseEstimator):
    """Tree-BLUE solver with a fit/predict surface.

    Parameters
    ----------
    covariance_mode : {"auto", "dense"}
        Keep covariances in succinct form when the instance is structured,
        or force dense arithmetic.

    Attributes
    ----------
    estimates_ : dict mapping node id to Estimate
    report_ : SolveReport
    """

    def __init__(self, covariance_mode="auto"):
        self.covariance_mode = covariance_mode

    def fit(self, tree, measurements=None):
        """Solve the tree; ``measurements`` defaults to noiseless reads."""
        if measurements is None:
            measurements = measure_tree(tree, 0)
        self.report_ = solve_tree_blue(tree, measurements, self.covariance_mode)
        self.estimates_ = self.report_.estimates
        return self

    def predict(self, node_ids):
        """Per-node estimate vectors, stacked in the order requested."""
        if not hasattr(self, "estimates_"):
            raise UsageError("solver is not fitted")
        if isinstance(node_ids, str):
            return self.estimates_[node_ids].z
        return np.vstack([self.estimates_[i].z for i in node_ids])
