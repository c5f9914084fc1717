"""Multi-pass integer post-processing of the top-down stage.

Instead of the exact top-down fusion, each sibling group is solved jointly:
one constrained least-squares pass per projection operator (total, then
full, in the production-style configuration), followed by the analogous
rounding passes that pick a 0/1 increment over the floored solution.  Every
pass re-imposes the full constraint systems; later passes additionally pin
the projections fixed by earlier ones.
"""

import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .blue import Estimate, SolveReport, bottom_up, per_node_estimates
from .errors import (
    InfeasibleProblemError,
    SchemaError,
    SingularMatrixError,
    UsageError,
)
from .linalg import SuccinctMatrix, symmetrized
from .noise import measure_tree
from .solvers import (
    active_set_qp,
    eliminate_pinned_variables,
    find_feasible_point,
    reduce_equalities,
    solve_binary_rounding,
)

TOTAL = "total"
FULL = "full"
_KINDS = (TOTAL, FULL)


@dataclass(frozen=True)
class PassSpec:
    """Ordered projection operators applied at one tree level."""

    level: int
    projections: tuple

    def __post_init__(self):
        object.__setattr__(self, "projections", tuple(self.projections))
        if not self.projections:
            raise SchemaError("a pass list cannot be empty")
        for kind in self.projections:
            if kind not in _KINDS:
                raise SchemaError(f"unknown projection kind {kind!r}")


def census_passes(n_levels):
    """Production-style configuration: full-only at the root and leaf
    levels, (total, full) everywhere in between."""
    specs = []
    for level in range(n_levels):
        if level == 0 or level == n_levels - 1:
            specs.append(PassSpec(level=level, projections=(FULL,)))
        else:
            specs.append(PassSpec(level=level, projections=(TOTAL, FULL)))
    return specs


def _passes_by_level(passes, n_levels):
    if passes is None:
        passes = census_passes(n_levels)
    table = {}
    for i, entry in enumerate(passes):
        if isinstance(entry, PassSpec):
            table[entry.level] = entry.projections
        else:
            table[i] = tuple(entry)
    for level in range(n_levels):
        if level not in table:
            raise SchemaError(f"no pass configuration for level {level}")
        for kind in table[level]:
            if kind not in _KINDS:
                raise SchemaError(f"unknown projection kind {kind!r}")
    return table


def _projection_matrix(kind, n):
    if kind == TOTAL:
        return np.ones((1, n))
    return np.eye(n)


def weight_matrix(omega_up, cs, q, alpha, node_id=None):
    """The pass weight ``P = (Q (Omega + alpha R'R) Q')^{-1}``.

    On the succinct path the regularized covariance has components
    ``C0 = A + alpha r1'r1`` and ``C1 = B + alpha r1'r1 + d alpha r2'r2``;
    the total-pass weight is then the scalar ``1 / (d * 1'C1 1)`` and the
    full-pass weight the succinct componentwise inverse.
    """
    if alpha <= 0:
        raise SchemaError("alpha must be positive")
    if q not in _KINDS:
        raise SchemaError(f"unknown projection kind {q!r}")
    if isinstance(omega_up, SuccinctMatrix) and omega_up.d > 1:
        d = omega_up.d
        reg1 = alpha * cs.r1.T @ cs.r1 if cs.r1.shape[0] else 0.0
        reg2 = alpha * d * cs.r2.T @ cs.r2 if cs.r2.shape[0] else 0.0
        c0 = symmetrized(omega_up.a + reg1)
        c1 = symmetrized(omega_up.b + reg1 + reg2)
        if q == TOTAL:
            denom = float(d * c1.sum())
            if abs(denom) < 1e-12:
                raise SingularMatrixError(
                    "total-pass weight is singular", block="c1", node_id=node_id
                )
            return 1.0 / denom
        try:
            inv0 = np.linalg.inv(c0)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "full-pass weight block C0 is singular", block="c0", node_id=node_id
            )
        try:
            inv1 = np.linalg.inv(c1)
        except np.linalg.LinAlgError:
            raise SingularMatrixError(
                "full-pass weight block C1 is singular", block="c1", node_id=node_id
            )
        return SuccinctMatrix(symmetrized(inv0), symmetrized(inv1), d)
    dense = (
        omega_up.to_dense() if isinstance(omega_up, SuccinctMatrix) else np.asarray(omega_up)
    )
    req = cs.req
    if req.shape[0]:
        dense = dense + alpha * req.T @ req
    qmat = _projection_matrix(q, dense.shape[0])
    core = qmat @ dense @ qmat.T
    try:
        inv = np.linalg.inv(core)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(
            "pass weight is singular", block="QMQ^T", node_id=node_id
        )
    return float(inv[0, 0]) if q == TOTAL else symmetrized(inv)


def _weight_dense(weight, n, kind):
    if kind == TOTAL:
        return np.array([[float(weight)]])
    if isinstance(weight, SuccinctMatrix):
        return weight.to_dense()
    return np.asarray(weight, dtype=float)


@dataclass
class QPProblem:
    """One constrained least-squares pass over a sibling group.

    The quadratic objective ``sum_v (Q(z_v - target_v))' P_v (...)`` is
    encoded with auxiliary variables ``w_v = Q(z_v - target_v)`` and
    ``y_v = P_v w_v``, so the objective reduces to ``sum_v w_v'y_v`` at the
    cost of two blocks of linear equality rows per child.
    """

    children: tuple
    targets: dict
    weights: dict
    constraints: dict
    q_kind: str
    n: int
    parent_value: np.ndarray | None = None
    consistency_kinds: tuple = ()
    consistency_targets: dict | None = None
    last_diagnostics: object = None

    def q_rows(self):
        return 1 if self.q_kind == TOTAL else self.n

    def n_vars(self):
        nc = len(self.children)
        return nc * self.n + 2 * nc * self.q_rows()

    def slices(self):
        nc = len(self.children)
        q = self.q_rows()
        z = {c: slice(i * self.n, (i + 1) * self.n) for i, c in enumerate(self.children)}
        base = nc * self.n
        w = {c: slice(base + 2 * i * q, base + (2 * i + 1) * q) for i, c in enumerate(self.children)}
        y = {c: slice(base + (2 * i + 1) * q, base + (2 * i + 2) * q) for i, c in enumerate(self.children)}
        return z, w, y

    def _aux_scale(self, child):
        pmat = _weight_dense(self.weights[child], self.n, self.q_kind)
        return float(np.sqrt(max(1.0, float(np.abs(pmat).max()))))

    def assemble(self):
        n, q = self.n, self.q_rows()
        nv = self.n_vars()
        zsl, wsl, ysl = self.slices()
        qmat = _projection_matrix(self.q_kind, n)

        eq_rows, eq_rhs, labels = [], [], []

        def add_eq(row, rhs, label):
            eq_rows.append(row)
            eq_rhs.append(rhs)
            labels.append(label)

        for child in self.children:
            cs = self.constraints[child]
            req, rval = cs.req, cs.rval
            for i in range(req.shape[0]):
                row = np.zeros(nv)
                row[zsl[child]] = req[i]
                add_eq(row, rval[i], ("req", child, i))
            target = self.targets[child]
            pmat = _weight_dense(self.weights[child], n, self.q_kind)
            # auxiliaries carry sqrt-of-weight scaling (w stored times
            # sqrt(s), y divided by it) so badly scaled weights cannot
            # wreck the KKT conditioning; the w'y objective is unchanged
            root_s = self._aux_scale(child)
            for i in range(q):
                row = np.zeros(nv)
                row[zsl[child]] = root_s * qmat[i]
                row[wsl[child]][i] = -1.0
                add_eq(row, root_s * float(qmat[i] @ target), ("aux_w", child, i))
            for i in range(q):
                row = np.zeros(nv)
                row[wsl[child]] = pmat[i] / (root_s * root_s)
                row[ysl[child]][i] = -1.0
                add_eq(row, 0.0, ("aux_y", child, i))
            if self.consistency_kinds:
                prior = self.consistency_targets[child]
                for k, kind in enumerate(self.consistency_kinds):
                    bmat = _projection_matrix(kind, n)
                    for i in range(bmat.shape[0]):
                        row = np.zeros(nv)
                        row[zsl[child]] = bmat[i]
                        add_eq(row, float(bmat[i] @ prior), ("consistency", child, (k, i)))
        if self.parent_value is not None:
            for i in range(n):
                row = np.zeros(nv)
                for child in self.children:
                    row[zsl[child]][i] = 1.0
                add_eq(row, float(self.parent_value[i]), ("parent_sum", None, i))

        ineq_rows, ineq_rhs, ineq_labels = [], [], []
        for child in self.children:
            cs = self.constraints[child]
            for i in range(cs.gineq.shape[0]):
                row = np.zeros(nv)
                row[zsl[child]] = cs.gineq[i]
                ineq_rows.append(row)
                ineq_rhs.append(float(cs.gval[i]))
                ineq_labels.append(("ineq", child, i))
            for i in range(n):
                row = np.zeros(nv)
                row[zsl[child]][i] = -1.0
                ineq_rows.append(row)
                ineq_rhs.append(0.0)
                ineq_labels.append(("nonneg", child, i))

        h = np.zeros((nv, nv))
        for child in self.children:
            ws, ys = wsl[child], ysl[child]
            h[ws, ys] = np.eye(q)
            h[ys, ws] = np.eye(q)

        return {
            "h": h,
            "c": np.zeros(nv),
            "eq": np.vstack(eq_rows) if eq_rows else np.zeros((0, nv)),
            "eq_rhs": np.asarray(eq_rhs, dtype=float),
            "ineq": np.vstack(ineq_rows) if ineq_rows else np.zeros((0, nv)),
            "ineq_rhs": np.asarray(ineq_rhs, dtype=float),
            "labels": labels + ineq_labels,
            "ineq_labels": ineq_labels,
        }

    def initial_hint(self):
        n, q = self.n, self.q_rows()
        zsl, wsl, ysl = self.slices()
        qmat = _projection_matrix(self.q_kind, n)
        hint = np.zeros(self.n_vars())
        for child in self.children:
            z0 = (
                self.consistency_targets[child]
                if self.consistency_targets is not None
                else self.targets[child]
            )
            hint[zsl[child]] = z0
            pmat = _weight_dense(self.weights[child], n, self.q_kind)
            root_s = self._aux_scale(child)
            w0 = root_s * (qmat @ (z0 - self.targets[child]))
            hint[wsl[child]] = w0
            hint[ysl[child]] = pmat @ w0 / (root_s * root_s)
        return hint


def least_squares_pass(problem):
    """Solve one least-squares pass; returns per-child solution vectors.

    KKT diagnostics of the underlying active-set solve are left on
    ``problem.last_diagnostics``.
    """
    data = problem.assemble()
    pins, free = eliminate_pinned_variables(data["eq"], data["eq_rhs"])
    eq_f, eq_rhs_f, ineq_f, ineq_rhs_f, labels_f, h_f, c_f = _reduce_qp(data, pins, free)
    # the raw rows (integral-ish, sparse) suit the LP; the orthonormal
    # basis (redundancy-free, perfectly conditioned) suits the KKT solves
    eq_k, eq_rhs_k = reduce_equalities(eq_f, eq_rhs_f)
    x0 = find_feasible_point(
        eq_f,
        eq_rhs_f,
        ineq_f,
        ineq_rhs_f,
        hint=problem.initial_hint()[free],
        row_labels=labels_f,
    )
    result = active_set_qp(h_f, c_f, eq_k, eq_rhs_k, ineq_f, ineq_rhs_f, x0)
    problem.last_diagnostics = result
    full = pins.copy()
    full[free] = result.x
    zsl, _, _ = problem.slices()
    return {child: full[zsl[child]].copy() for child in problem.children}


def _reduce_qp(data, pins, free):
    """Substitute pinned variables out of every system of a pass problem."""
    eq, eq_rhs = data["eq"], data["eq_rhs"]
    ineq, ineq_rhs = data["ineq"], data["ineq_rhs"]
    h, c = data["h"], data["c"]
    anchored = ~free
    eq_shift = eq[:, anchored] @ pins[anchored] if anchored.any() else 0.0
    eq_f = eq[:, free]
    eq_rhs_f = eq_rhs - eq_shift
    keep = np.abs(eq_f).sum(axis=1) > 1e-12
    dead = ~keep
    if dead.any() and np.abs(eq_rhs_f[dead]).max(initial=0.0) > 1e-6:
        raise InfeasibleProblemError("pinned variables contradict an equality")
    eq_f, eq_rhs_f = eq_f[keep], eq_rhs_f[keep]

    in_shift = ineq[:, anchored] @ pins[anchored] if anchored.any() else 0.0
    ineq_f = ineq[:, free]
    ineq_rhs_f = ineq_rhs - in_shift
    keep_in = np.abs(ineq_f).sum(axis=1) > 1e-12
    dead_in = ~keep_in
    if dead_in.any() and ineq_rhs_f[dead_in].min(initial=0.0) < -1e-9:
        raise InfeasibleProblemError("pinned variables violate an inequality")
    labels = [lab for lab, k in zip(data["ineq_labels"], keep_in) if k]
    ineq_f, ineq_rhs_f = ineq_f[keep_in], ineq_rhs_f[keep_in]

    h_f = h[np.ix_(free, free)]
    c_f = c[free] + (h[np.ix_(free, anchored)] @ pins[anchored] if anchored.any() else 0.0)
    return eq_f, eq_rhs_f, ineq_f, ineq_rhs_f, labels, h_f, c_f


@dataclass
class RoundingProblem:
    """One rounding pass: choose a 0/1 increment over the floored input."""

    children: tuple
    fractional: dict
    constraints: dict
    q_kind: str
    n: int
    parent_value: np.ndarray | None = None
    consistency_kinds: tuple = ()
    consistency_targets: dict | None = None

    def q_rows(self):
        return 1 if self.q_kind == TOTAL else self.n


def _near_int(values, what, tol=1e-5):
    arr = np.asarray(values, dtype=float)
    rounded = np.rint(arr)
    if arr.size and np.abs(arr - rounded).max() > tol:
        raise InfeasibleProblemError(
            f"{what} must be integral for rounding, worst residual "
            f"{np.abs(arr - rounded).max():.3e}"
        )
    return rounded.astype(np.int64)


def rounder_pass(problem):
    """Round a feasible fractional solution to a feasible integral one.

    Minimizes ``sum_v 1'|Q(frac_v - out_v)|`` over ``out = floor(frac) + y``
    with binary y, subject to the same constraint systems.  The output is
    exactly integral and exactly feasible.
    """
    n = problem.n
    children = problem.children
    nc = len(children)
    nvar = nc * n
    base = np.concatenate(
        [np.floor(problem.fractional[c] + 1e-6) for c in children]
    ).astype(np.int64)
    frac = np.concatenate([problem.fractional[c] for c in children]) - base

    eq_rows, eq_rhs = [], []
    for i, child in enumerate(children):
        cs = problem.constraints[child]
        req = cs.req
        if req.shape[0]:
            block = np.zeros((req.shape[0], nvar))
            block[:, i * n : (i + 1) * n] = req
            eq_rows.append(block)
            eq_rhs.append(
                _near_int(cs.rval - req @ base[i * n : (i + 1) * n], f"R rhs of {child}")
            )
        if problem.consistency_kinds:
            prior = problem.consistency_targets[child]
            for kind in problem.consistency_kinds:
                bmat = _projection_matrix(kind, n)
                block = np.zeros((bmat.shape[0], nvar))
                block[:, i * n : (i + 1) * n] = bmat
                eq_rows.append(block)
                eq_rhs.append(
                    _near_int(
                        bmat @ prior - bmat @ base[i * n : (i + 1) * n],
                        f"consistency rhs of {child}",
                    )
                )
    parent_c = None
    if problem.parent_value is not None:
        block = np.tile(np.eye(n), (1, nc))
        eq_rows.append(block)
        parent_c = _near_int(
            problem.parent_value - base.reshape(nc, n).sum(axis=0), "parent rhs"
        )
        eq_rhs.append(parent_c)
    eq = np.vstack(eq_rows) if eq_rows else np.zeros((0, nvar))
    eq_rhs = np.concatenate(eq_rhs) if eq_rhs else np.zeros(0)

    ineq_rows, ineq_rhs = [], []
    for i, child in enumerate(children):
        cs = problem.constraints[child]
        if cs.gineq.shape[0]:
            block = np.zeros((cs.gineq.shape[0], nvar))
            block[:, i * n : (i + 1) * n] = cs.gineq
            ineq_rows.append(block)
            ineq_rhs.append(
                _near_int(cs.gval - cs.gineq @ base[i * n : (i + 1) * n], f"G rhs of {child}")
            )
    ineq = np.vstack(ineq_rows) if ineq_rows else np.zeros((0, nvar))
    ineq_rhs = np.concatenate(ineq_rhs) if ineq_rhs else np.zeros(0)

    fixed, free = _presolve_binary(eq, eq_rhs, ineq, ineq_rhs, nvar)

    qmat = _projection_matrix(problem.q_kind, n)
    obj = np.zeros((nc * qmat.shape[0], nvar))
    for i in range(nc):
        obj[i * qmat.shape[0] : (i + 1) * qmat.shape[0], i * n : (i + 1) * n] = qmat
    offsets = obj @ frac - obj[:, ~free] @ fixed[~free]

    y = fixed.astype(np.int64)
    if free.any():
        eq_f, eq_rhs_f = _restrict(eq, eq_rhs, fixed, free)
        ineq_f, ineq_rhs_f = _restrict(ineq, ineq_rhs, fixed, free)
        child_tau = None
        if problem.q_kind == FULL and TOTAL in problem.consistency_kinds:
            child_tau = [
                int(np.rint(problem.consistency_targets[c].sum()))
                - int(base[i * n : (i + 1) * n].sum())
                for i, c in enumerate(children)
            ]
        node_bound, node_candidate = _rounding_bound_factory(
            problem.q_kind, nc, n, frac, parent_c, fixed, free, child_tau=child_tau
        )
        guess = _greedy_increment_candidate(nc, n, frac, parent_c, fixed, free)
        y_free, _ = solve_binary_rounding(
            obj[:, free], offsets, eq_f, eq_rhs_f, ineq_f, ineq_rhs_f,
            node_bound=node_bound,
            node_candidate=node_candidate,
            initial_incumbent=guess[free] if guess is not None else None,
        )
        y[free] = y_free

    out = base + y
    _check_exact(problem, out, eq, eq_rhs, ineq, ineq_rhs, base)
    return {
        child: out[i * n : (i + 1) * n].copy() for i, child in enumerate(children)
    }


def _greedy_group_cost(f, k):
    """min of sum |f - y| over 0/1 y with sum(y) = k: set the k largest."""
    if k < 0 or k > f.size:
        return np.inf
    ordered = np.sort(f)[::-1]
    return float(ordered.sum() + (1.0 - 2.0 * ordered[:k]).sum())


def _min_cost_transport(cost, allowed, row_budget, col_budget):
    """Exact min-cost 0/1 transportation by successive shortest paths.

    Ships ``row_budget[v]`` unit increments from child v through allowed
    cells to meet ``col_budget[b]`` per bucket; cell costs may be negative.
    Returns (total cost, 0/1 assignment) or (inf, None) when infeasible.
    Shortest paths use a vectorized Bellman-Ford over the children/buckets
    bipartite residual graph, which is tiny.
    """
    nr, ncol = cost.shape
    need = int(row_budget.sum())
    if need != int(col_budget.sum()):
        return np.inf, None
    y = np.zeros((nr, ncol), dtype=np.int64)
    row_left = row_budget.astype(np.int64).copy()
    col_left = col_budget.astype(np.int64).copy()
    total = 0.0
    for _ in range(need):
        dist_c = np.where(row_left > 0, 0.0, np.inf)  # children reachable from source
        pred_c = np.full(nr, -2, dtype=np.int64)  # -2: from source, b>=0: via bucket b
        dist_b = np.full(ncol, np.inf)
        pred_b = np.full(ncol, -1, dtype=np.int64)  # child the bucket was reached from
        for _ in range(nr + ncol + 1):
            fwd = np.where(allowed & (y == 0), dist_c[:, None] + cost, np.inf)
            nb = fwd.min(axis=0)
            better_b = nb < dist_b - 1e-12
            if better_b.any():
                dist_b = np.where(better_b, nb, dist_b)
                pred_b = np.where(better_b, fwd.argmin(axis=0), pred_b)
            bwd = np.where(allowed & (y == 1), dist_b[None, :] - cost, np.inf)
            ncst = bwd.min(axis=1)
            better_c = ncst < dist_c - 1e-12
            if not better_b.any() and not better_c.any():
                break
            if better_c.any():
                dist_c = np.where(better_c, ncst, dist_c)
                pred_c = np.where(better_c, bwd.argmin(axis=1), pred_c)
        exit_dist = np.where(col_left > 0, dist_b, np.inf)
        if not np.isfinite(exit_dist.min(initial=np.inf)):
            return np.inf, None
        b = int(exit_dist.argmin())
        total += float(exit_dist[b])
        col_left[b] -= 1
        # walk the alternating path back to the source, flipping cells
        for _ in range(nr * ncol + 2):
            v = int(pred_b[b])
            y[v, b] = 1
            if pred_c[v] == -2:
                row_left[v] -= 1
                break
            b = int(pred_c[v])
            y[v, b] = 0
        else:
            # inconsistent predecessor chain (cost ties); give up cleanly
            return np.nan, None
    return total, y


def _rounding_bound_factory(q_kind, nc, n, frac, parent_c, fixed, free, child_tau=None):
    """Group-sum integrality bound for the rounding branch-and-bound.

    Any integral increment makes per-child totals (total pass) or
    per-bucket column sums (full pass) integers, which bounds the cost
    from below regardless of the remaining constraint systems; dropping
    those systems only loosens the bound, so it stays valid.
    ``child_tau`` carries per-child increment totals already pinned by an
    earlier pass, which tightens the full-pass bound considerably.
    """
    frac_m = frac.reshape(nc, n)

    def expand(lo, hi):
        lovec = fixed.copy()
        hivec = fixed.copy()
        lovec[free] = lo
        hivec[free] = hi
        return lovec.reshape(nc, n), hivec.reshape(nc, n)

    if q_kind == TOTAL:
        child_offsets = frac_m.sum(axis=1)
        target = int(np.rint(parent_c.sum())) if parent_c is not None else None

        def totals_dp(tlo, thi):
            """Min cost and argmin totals for sum_v |offset_v - T_v| = target."""
            dp = {0: (0.0, ())}
            for v in range(nc):
                ndp = {}
                for total, (cost, picks) in dp.items():
                    for t in range(tlo[v], thi[v] + 1):
                        val = cost + abs(child_offsets[v] - t)
                        key = total + t
                        if val < ndp.get(key, (np.inf, ()))[0]:
                            ndp[key] = (val, picks + (t,))
                dp = ndp
            return dp.get(target, (np.inf, None))

        def bound(lo, hi):
            lom, him = expand(lo, hi)
            tlo = np.rint(lom.sum(axis=1)).astype(int)
            thi = np.rint(him.sum(axis=1)).astype(int)
            if target is None:
                return float(
                    sum(
                        min(abs(child_offsets[v] - t) for t in range(tlo[v], thi[v] + 1))
                        for v in range(nc)
                    )
                )
            return float(totals_dp(tlo, thi)[0])

        def candidate(lo, hi):
            if target is None:
                return None
            lom, him = expand(lo, hi)
            tlo = np.rint(lom.sum(axis=1)).astype(int)
            thi = np.rint(him.sum(axis=1)).astype(int)
            _, picks = totals_dp(tlo, thi)
            if picks is None:
                return None
            forced = lom == him
            row_budget = np.asarray(picks, dtype=np.int64) - np.rint(
                (lom * forced).sum(axis=1)
            ).astype(np.int64)
            col_budget = col_targets - np.rint((lom * forced).sum(axis=0)).astype(
                np.int64
            )
            if np.any(row_budget < 0) or np.any(col_budget < 0):
                return None
            _, assign = _min_cost_transport(
                1.0 - 2.0 * frac_m, ~forced, row_budget, col_budget
            )
            if assign is None:
                return None
            y_full = lom.copy()
            y_full[~forced] = assign[~forced]
            return y_full.ravel()[free]

        col_targets = (
            np.rint(parent_c).astype(int) if parent_c is not None else None
        )
        return bound, (candidate if target is not None else None)

    col_targets = (
        np.rint(parent_c).astype(int) if parent_c is not None else None
    )

    def grouped_bound(f_groups, lom, him, targets, axis):
        """Vectorized sum over groups of the greedy k-of-group minimum."""
        forced = lom == him
        fixed_cost = float((np.abs(f_groups - lom) * forced).sum())
        if targets is None:
            ff = np.where(forced, 0.0, np.minimum(f_groups, 1.0 - f_groups))
            return fixed_cost + float(ff.sum())
        k = targets - np.rint((lom * forced).sum(axis=axis)).astype(int)
        m = (~forced).sum(axis=axis)
        if np.any(k < 0) or np.any(k > m):
            return np.inf
        masked = np.where(forced, -np.inf, f_groups)
        ordered = -np.sort(-masked, axis=axis)
        vals = np.where(np.isfinite(ordered), ordered, 0.0)
        free_sum = vals.sum(axis=axis)
        gain = np.cumsum(1.0 - 2.0 * vals, axis=axis)
        gain = np.concatenate(
            [np.zeros_like(np.take(gain, [0], axis=axis)), gain], axis=axis
        )
        picked = np.take_along_axis(
            gain, np.expand_dims(k, axis=axis), axis=axis
        ).squeeze(axis=axis)
        return fixed_cost + float((free_sum + picked).sum())

    memo = {}

    def transport(lo, hi):
        key = (lo.tobytes(), hi.tobytes())
        hit = memo.get(key)
        if hit is not None:
            return hit
        lom, him = expand(lo, hi)
        forced = lom == him
        fixed_cost = float((np.abs(frac_m - lom) * forced).sum())
        row_budget = np.asarray(child_tau, dtype=np.int64) - np.rint(
            (lom * forced).sum(axis=1)
        ).astype(np.int64)
        col_budget = col_targets - np.rint((lom * forced).sum(axis=0)).astype(np.int64)
        if np.any(row_budget < 0) or np.any(col_budget < 0):
            memo[key] = (np.inf, None)
            return np.inf, None
        allowed = ~forced
        base_free = float((frac_m * allowed).sum())
        value, assign = _min_cost_transport(
            1.0 - 2.0 * frac_m, allowed, row_budget, col_budget
        )
        if assign is None:
            result = (value, None)  # inf (infeasible) or nan (fallback)
        else:
            y_full = lom.copy()
            y_full[allowed] = assign[allowed]
            result = (fixed_cost + base_free + value, y_full.ravel()[free])
        if len(memo) > 64:
            memo.clear()
        memo[key] = result
        return result

    use_transport = child_tau is not None and col_targets is not None

    def bound(lo, hi):
        lom, him = expand(lo, hi)
        by_bucket = grouped_bound(frac_m, lom, him, col_targets, axis=0)
        if child_tau is None or not np.isfinite(by_bucket):
            return by_bucket
        by_child = grouped_bound(
            frac_m, lom, him, np.asarray(child_tau, dtype=int), axis=1
        )
        separable = max(by_bucket, by_child)
        if not use_transport:
            return separable
        value, _ = transport(lo, hi)
        if np.isnan(value):
            return separable
        return max(separable, value)

    candidate = (lambda lo, hi: transport(lo, hi)[1]) if use_transport else None
    return bound, candidate


def _greedy_increment_candidate(nc, n, frac, parent_c, fixed, free):
    """Cheap feasible-increment guess: per bucket, hand the required number
    of increments to the children with the largest fractional parts."""
    y = fixed.copy()
    if parent_c is None:
        y[free] = np.rint(frac[free])
        return y
    fm = frac.reshape(nc, n)
    ym = y.reshape(nc, n)
    freem = free.reshape(nc, n)
    for b in range(n):
        idx = np.nonzero(freem[:, b])[0]
        k = int(parent_c[b]) - int(np.rint(ym[~freem[:, b], b].sum()))
        if k < 0 or k > idx.size:
            return None
        order = idx[np.argsort(-fm[idx, b], kind="stable")]
        ym[order[:k], b] = 1.0
        ym[order[k:], b] = 0.0
    return ym.ravel()


def _restrict(rows, rhs, fixed, free):
    if not rows.shape[0]:
        return np.zeros((0, int(free.sum()))), np.zeros(0)
    adjusted = rhs - rows[:, ~free] @ fixed[~free]
    keep = np.abs(rows[:, free]).sum(axis=1) > 0
    return rows[keep][:, free], adjusted[keep]


def _presolve_binary(eq, eq_rhs, ineq, ineq_rhs, nvar):
    """Pin binaries forced by the integer systems; returns (values, free mask)."""
    fixed = np.zeros(nvar)
    free = np.ones(nvar, dtype=bool)

    def row_bounds(row):
        cols = np.nonzero((np.abs(row) > 1e-12) & free)[0]
        fixed_part = float(row[~free] @ fixed[~free])
        lo = fixed_part + row[cols][row[cols] < 0].sum()
        hi = fixed_part + row[cols][row[cols] > 0].sum()
        return cols, lo, hi

    changed = True
    while changed:
        changed = False
        for row, rhs in zip(eq, eq_rhs):
            cols, lo, hi = row_bounds(row)
            if not cols.size:
                if abs(lo - rhs) > 1e-9:
                    raise InfeasibleProblemError("rounding equalities are inconsistent")
                continue
            if rhs < lo - 1e-9 or rhs > hi + 1e-9:
                raise InfeasibleProblemError("rounding equalities are inconsistent")
            if abs(rhs - lo) < 1e-9:
                for j in cols:
                    fixed[j] = 0.0 if row[j] > 0 else 1.0
                    free[j] = False
                changed = True
            elif abs(rhs - hi) < 1e-9:
                for j in cols:
                    fixed[j] = 1.0 if row[j] > 0 else 0.0
                    free[j] = False
                changed = True
        for row, rhs in zip(ineq, ineq_rhs):
            cols, lo, hi = row_bounds(row)
            if not cols.size:
                if lo > rhs + 1e-9:
                    raise InfeasibleProblemError("rounding inequalities are inconsistent")
                continue
            if lo > rhs + 1e-9:
                raise InfeasibleProblemError("rounding inequalities are inconsistent")
            if abs(lo - rhs) < 1e-9:
                for j in cols:
                    fixed[j] = 0.0 if row[j] > 0 else 1.0
                    free[j] = False
                changed = True
    return fixed, free


def _check_exact(problem, out, eq, eq_rhs, ineq, ineq_rhs, base):
    y = out - base
    if np.any((y < 0) | (y > 1)):
        raise InfeasibleProblemError("rounding produced a non-binary increment")
    if eq.shape[0] and np.any(np.rint(eq @ y) != np.rint(eq_rhs)):
        raise InfeasibleProblemError("rounded output violates an equality")
    if ineq.shape[0] and np.any(ineq @ y > ineq_rhs + 1e-9):
        raise InfeasibleProblemError("rounded output violates an inequality")
    if np.any(out < 0):
        raise InfeasibleProblemError("rounded output is negative")


def multipass(
    children,
    targets,
    omegas,
    constraints,
    passes,
    parent_value=None,
    alpha=1.0,
    round_output=True,
):
    """Run the least-squares passes then the rounding passes for one group.

    ``passes`` is the ordered tuple of projection kinds for this level.
    Each pass stacks its projection into the consistency operator so later
    passes preserve what earlier ones fixed; the rounding phase restacks
    from scratch.
    """
    children = tuple(sorted(children))
    n = next(iter(targets.values())).size
    weights_by_kind = {}
    for kind in set(passes):
        weights_by_kind[kind] = {
            c: weight_matrix(omegas[c], constraints[c], kind, alpha, node_id=c)
            for c in children
        }

    prior_kinds = ()
    prior = None
    current = None
    diagnostics = []
    for i, kind in enumerate(passes):
        problem = QPProblem(
            children=children,
            targets=targets,
            weights=weights_by_kind[kind],
            constraints=constraints,
            q_kind=kind,
            n=n,
            parent_value=parent_value,
            consistency_kinds=prior_kinds,
            consistency_targets=prior,
        )
        try:
            current = least_squares_pass(problem)
        except InfeasibleProblemError as exc:
            raise InfeasibleProblemError(
                f"least-squares pass {i} ({kind}) infeasible: {exc}",
                violated=exc.violated,
            )
        diagnostics.append(problem.last_diagnostics)
        prior_kinds = prior_kinds + (kind,)
        prior = current
    fractional = current

    if not round_output:
        return fractional, diagnostics

    prior_kinds = ()
    prior = None
    for i, kind in enumerate(passes):
        problem = RoundingProblem(
            children=children,
            fractional=fractional,
            constraints=constraints,
            q_kind=kind,
            n=n,
            parent_value=parent_value,
            consistency_kinds=prior_kinds,
            consistency_targets=prior,
        )
        try:
            current = rounder_pass(problem)
        except InfeasibleProblemError as exc:
            raise InfeasibleProblemError(
                f"rounding pass {i} ({kind}) infeasible: {exc}", violated=exc.violated
            )
        prior_kinds = prior_kinds + (kind,)
        prior = current
    return current, diagnostics


def descend_multipass(
    tree, source_estimates, passes=None, alpha=1.0, round_output=True, algorithm="bluedown"
):
    """Drive multipass down the tree from a per-node estimate map."""
    table = _passes_by_level(passes if passes is not None else tree.passes_per_level,
                             tree.n_levels)
    t0 = time.perf_counter()
    values = {}
    root = tree.root_id
    root_sol, _ = multipass(
        [root],
        targets={root: source_estimates[root].z},
        omegas={root: source_estimates[root].omega},
        constraints={root: tree.nodes[root].constraints},
        passes=table[0],
        parent_value=None,
        alpha=alpha,
        round_output=round_output,
    )
    values[root] = root_sol[root]
    for parent_id in tree.internal_ids_by_depth():
        node = tree.nodes[parent_id]
        children = sorted(node.children)
        level = node.level + 1
        try:
            sol, _ = multipass(
                children,
                targets={c: source_estimates[c].z for c in children},
                omegas={c: source_estimates[c].omega for c in children},
                constraints={c: tree.nodes[c].constraints for c in children},
                passes=table[level],
                parent_value=values[parent_id],
                alpha=alpha,
                round_output=round_output,
            )
        except InfeasibleProblemError as exc:
            raise InfeasibleProblemError(
                f"children of {parent_id}: {exc}", violated=exc.violated
            )
        values.update(sol)
    estimates = {
        node_id: Estimate(z=np.asarray(v, dtype=float), omega=None)
        for node_id, v in values.items()
    }
    report = SolveReport(
        estimates=estimates,
        integral=round_output,
        timings={"top_down": time.perf_counter() - t0},
        algorithm=algorithm,
    )
    return report


def bluedown(tree, measurements, passes=None, alpha=1.0, round_output=True,
             covariance_mode="auto"):
    """Full pipeline: per-node ECGLS, bottom-up fusion, multipass descent.

    The descent consumes the bottom-up (subtree) estimates, so every output
    count reflects all measurements below it; outputs are nonnegative
    integers satisfying every constraint system exactly when
    ``round_output`` is set.
    """
    t0 = time.perf_counter()
    node_est = per_node_estimates(tree, measurements, covariance_mode)
    up = bottom_up(tree, node_est)
    prep = time.perf_counter() - t0
    report = descend_multipass(
        tree, up, passes=passes, alpha=alpha, round_output=round_output,
        algorithm="bluedown",
    )
    report.timings["per_node_and_bottom_up"] = prep
    return report


class BlueDownSolver(BaseEstimator):
    """Integer-feasible hierarchical solver with a fit/predict surface.

    Parameters
    ----------
    passes : list of PassSpec or list of pass-kind tuples, optional
        Per-level projection configuration; defaults to the instance's, or
        the production-style one.
    alpha : float
        Regularization weight replacing the covariance pseudoinverse.
    round_output : bool
        Emit integers (default) or stop at the fractional stage.
    covariance_mode : {"auto", "dense"}
    """

    def __init__(self, passes=None, alpha=1.0, round_output=True, covariance_mode="auto"):
        self.passes = passes
        self.alpha = alpha
        self.round_output = round_output
        self.covariance_mode = covariance_mode

    def fit(self, tree, measurements=None):
        if measurements is None:
            measurements = measure_tree(tree, 0)
        self.report_ = bluedown(
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
        if not hasattr(self, "estimates_"):
            raise UsageError("solver is not fitted")
        if isinstance(node_ids, str):
            return self.estimates_[node_ids].z
        return np.vstack([self.estimates_[i].z for i in node_ids])
