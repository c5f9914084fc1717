"""Constrained-optimization backends for the integer post-processing stage.

Two solvers live here: a primal active-set method for convex quadratic
programs (equality-constrained subproblems solved through the KKT system),
and an exact 0/1 rounding solver that enumerates exhaustively up to a size
threshold and otherwise branches and bounds on LP relaxations.  Both are
deterministic.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import InfeasibleProblemError, SolverError

FEAS_TOL = 1e-8
EXHAUSTIVE_LIMIT = 20
_BNB_NODE_LIMIT = 50_000


def find_feasible_point(eq, eq_rhs, ineq, ineq_rhs, hint=None, row_labels=None):
    """A point satisfying ``eq x = eq_rhs`` and ``ineq x <= ineq_rhs``.

    Tries the least-squares projection of ``hint`` onto the equality
    manifold first; falls back to a feasibility LP.  Raises
    ``InfeasibleProblemError`` carrying the labels of violated rows when
    the region is empty.
    """
    n = eq.shape[1] if eq.size else ineq.shape[1]
    if hint is not None:
        for candidate in (hint, np.maximum(hint, 0.0)):
            x = np.asarray(candidate, dtype=float).copy()
            if eq.shape[0]:
                correction, *_ = np.linalg.lstsq(eq, eq_rhs - eq @ x, rcond=None)
                x = x + correction
            ok_eq = not eq.shape[0] or np.abs(eq @ x - eq_rhs).max() < 1e-8
            ok_in = not ineq.shape[0] or (ineq @ x - ineq_rhs).max() <= 1e-9
            if ok_eq and ok_in:
                return x
    res = None
    for method in ("highs", "highs-ds"):
        res = linprog(
            c=np.zeros(n),
            A_ub=ineq if ineq.shape[0] else None,
            b_ub=ineq_rhs if ineq.shape[0] else None,
            A_eq=eq if eq.shape[0] else None,
            b_eq=eq_rhs if eq.shape[0] else None,
            bounds=[(None, None)] * n,
            method=method,
        )
        if res.status == 0 and res.x is not None:
            return res.x
    violated = []
    if row_labels and res.x is not None:
        resid = ineq @ res.x - ineq_rhs if ineq.shape[0] else np.zeros(0)
        violated = [row_labels[i] for i in np.nonzero(resid > 1e-7)[0]]
    raise InfeasibleProblemError(
        f"constraint system is infeasible (LP status {res.status})",
        violated=violated,
    )


def _solve_kkt(kkt, rhs):
    """LU solve with a least-squares fallback for singular working sets."""
    if rhs.size == 0:
        return rhs.copy()
    try:
        sol = np.linalg.solve(kkt, rhs)
        scale = 1.0 + float(np.abs(rhs).max(initial=0.0))
        if np.all(np.isfinite(sol)) and np.abs(kkt @ sol - rhs).max(initial=0.0) < 1e-8 * scale:
            return sol
    except np.linalg.LinAlgError:
        pass
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    kkt_stationarity: float
    kkt_complementarity: float
    iterations: int
    active: tuple


def _normalize_rows(rows, rhs):
    if not rows.shape[0]:
        return rows, rhs
    norms = np.linalg.norm(rows, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    return rows / norms[:, None], rhs / norms


def eliminate_pinned_variables(eq, eq_rhs, tol=1e-12):
    """Chase single-variable equality rows to pin variables.

    Returns (values, free mask); ``values`` holds the pinned entries and
    zeros elsewhere.  Zero-count constraints and their auxiliary rows pin
    large parts of a pass problem, shrinking every later solve.
    """
    n = eq.shape[1]
    values = np.zeros(n)
    free = np.ones(n, dtype=bool)
    if not eq.shape[0]:
        return values, free
    changed = True
    while changed:
        changed = False
        fixed_part = eq[:, ~free] @ values[~free] if (~free).any() else np.zeros(eq.shape[0])
        support = np.abs(eq) > tol
        live = support & free[None, :]
        counts = live.sum(axis=1)
        for idx in np.nonzero(counts == 1)[0]:
            j = int(np.nonzero(live[idx])[0][0])
            if not free[j]:
                continue
            values[j] = (eq_rhs[idx] - fixed_part[idx]) / eq[idx, j]
            free[j] = False
            changed = True
    return values, free


def reduce_equalities(eq, eq_rhs, tol=1e-11):
    """Replace an equality system by an orthonormal row basis.

    Removes redundant rows (frequent in stacked tree systems) and returns
    an equivalent system with perfectly conditioned rows.  Raises
    ``InfeasibleProblemError`` when the discarded combinations are
    inconsistent with the kept ones.
    """
    if not eq.shape[0]:
        return eq, eq_rhs
    u, s, vt = np.linalg.svd(eq, full_matrices=False)
    cutoff = tol * (s[0] if s.size else 1.0)
    keep = s > cutoff
    basis = vt[keep]
    rhs = (u[:, keep].T @ eq_rhs) / s[keep]
    # consistency of the dropped directions
    residual = eq_rhs - eq @ (basis.T @ rhs)
    if residual.size and np.abs(residual).max() > 1e-6 * (1.0 + np.abs(eq_rhs).max()):
        raise InfeasibleProblemError(
            "equality system is self-inconsistent "
            f"(residual {np.abs(residual).max():.3e})"
        )
    return basis, rhs


def active_set_qp(h, c, eq, eq_rhs, ineq, ineq_rhs, x0, max_iter=None):
    """Minimize ``0.5 x'Hx + c'x`` over ``eq x = rhs`` and ``ineq x <= rhs``.

    ``H`` need only be positive semidefinite on the feasible subspace;
    each iteration solves the equality-constrained KKT system for the
    current working set by least squares (minimum-norm step in flat
    directions, which keeps the method deterministic).  Constraint rows
    are normalized once for conditioning; multiplier dropping follows
    Bland's smallest-index rule to avoid cycling at degenerate vertices.
    """
    n = x0.size
    x = np.asarray(x0, dtype=float).copy()
    if n == 0:
        return QPResult(x=x, objective=0.0, kkt_stationarity=0.0,
                        kkt_complementarity=0.0, iterations=0, active=())
    eq, eq_rhs = _normalize_rows(np.asarray(eq, float), np.asarray(eq_rhs, float))
    ineq, ineq_rhs = _normalize_rows(np.asarray(ineq, float), np.asarray(ineq_rhs, float))
    if max_iter is None:
        max_iter = 100 + 12 * (n + ineq.shape[0])
    slack = ineq @ x - ineq_rhs if ineq.shape[0] else np.zeros(0)
    active = sorted(np.nonzero(slack > -1e-9)[0].tolist())
    for iteration in range(max_iter):
        grad = h @ x + c
        scale = 1.0 + float(np.abs(grad).max(initial=0.0))
        rows = [eq] if eq.shape[0] else []
        if active:
            rows.append(ineq[active])
        cmat = np.vstack(rows) if rows else np.zeros((0, n))
        kkt = np.block(
            [[h, cmat.T], [cmat, np.zeros((cmat.shape[0], cmat.shape[0]))]]
        )
        rhs = np.concatenate([-grad, np.zeros(cmat.shape[0])])
        sol = _solve_kkt(kkt, rhs)
        p = sol[:n]
        lam = sol[n + eq.shape[0]:]
        if np.abs(p).max(initial=0.0) < 1e-10 * (1.0 + np.abs(x).max(initial=0.0)):
            drop = [i for i, v in enumerate(lam) if v < -1e-8 * scale]
            if not drop:
                break
            if iteration < max_iter // 2:
                # LP-vertex starts carry many wrongly active bounds; shed
                # them in bulk, falling back to Bland's rule later
                for pick in sorted(drop, reverse=True):
                    active.pop(pick)
            else:
                pick = min(drop, key=lambda i: active[i])
                active.pop(pick)
            continue
        alpha = 1.0
        blocking = -1
        if ineq.shape[0]:
            step = ineq @ p
            gap = ineq_rhs - ineq @ x
            for i in np.nonzero(step > 1e-12)[0]:
                if i in active:
                    continue
                ratio = float(gap[i]) / float(step[i])
                if ratio < alpha - 1e-12 or (blocking >= 0 and ratio < alpha + 1e-12 and i < blocking):
                    alpha = max(ratio, 0.0)
                    blocking = int(i)
        x = x + alpha * p
        if blocking >= 0 and alpha < 1.0 - 1e-12:
            active = sorted(active + [blocking])
    else:
        raise SolverError(f"active-set QP did not converge in {max_iter} iterations")

    grad = h @ x + c
    rows = [eq] if eq.shape[0] else []
    if active:
        rows.append(ineq[active])
    cmat = np.vstack(rows) if rows else np.zeros((0, n))
    if cmat.shape[0]:
        mult, *_ = np.linalg.lstsq(cmat.T, -grad, rcond=None)
        stationarity = float(np.abs(grad + cmat.T @ mult).max())
    else:
        stationarity = float(np.abs(grad).max(initial=0.0))
    comp = 0.0
    if ineq.shape[0]:
        slack = ineq_rhs - ineq @ x
        lam_full = np.zeros(ineq.shape[0])
        if active:
            lam_full[active] = mult[eq.shape[0]:] if cmat.shape[0] else 0.0
        comp = float(np.abs(lam_full * slack).max(initial=0.0))
    return QPResult(
        x=x,
        objective=float(0.5 * x @ h @ x + c @ x),
        kkt_stationarity=stationarity,
        kkt_complementarity=comp,
        iterations=iteration + 1,
        active=tuple(active),
    )


def _increment_key(y):
    return tuple(int(i) for i in np.flatnonzero(y > 0.5))


def _verify_binary(y, eq, eq_rhs, ineq, ineq_rhs):
    yi = np.rint(y).astype(np.int64)
    if eq.shape[0] and np.any(np.rint(eq @ yi) != np.rint(eq_rhs)):
        return None
    if ineq.shape[0] and np.any(ineq @ yi > ineq_rhs + 1e-9):
        return None
    return yi


def _exhaustive_binary(obj_rows, obj_offsets, eq, eq_rhs, ineq, ineq_rhs, n):
    best_cost = None
    best_key = None
    best_y = None
    chunk = 1 << 16
    total = 1 << n
    shifts = np.arange(n, dtype=np.uint64)
    for start in range(0, total, chunk):
        codes = np.arange(start, min(start + chunk, total), dtype=np.uint64)
        ys = ((codes[:, None] >> shifts) & 1).astype(np.int64)
        ok = np.ones(len(codes), dtype=bool)
        if eq.shape[0]:
            ok &= np.all(np.abs(ys @ eq.T - eq_rhs) < 0.5, axis=1)
        if ineq.shape[0]:
            ok &= np.all(ys @ ineq.T <= ineq_rhs + 1e-9, axis=1)
        if not ok.any():
            continue
        feas = ys[ok]
        cost = np.abs(obj_offsets - feas @ obj_rows.T).sum(axis=1)
        for idx in np.argsort(cost, kind="stable"):
            c = float(cost[idx])
            if best_cost is not None and c > best_cost + 1e-9:
                break
            key = _increment_key(feas[idx])
            if (
                best_cost is None
                or c < best_cost - 1e-9
                or (abs(c - best_cost) <= 1e-9 and key < best_key)
            ):
                best_cost, best_key, best_y = c, key, feas[idx].copy()
    if best_y is None:
        raise InfeasibleProblemError("no 0/1 assignment satisfies the constraints")
    return best_y, best_cost


def _bnb_binary(obj_rows, obj_offsets, eq, eq_rhs, ineq, ineq_rhs, n,
                node_bound=None, node_candidate=None, initial_incumbent=None):
    q = obj_rows.shape[0]
    c = np.concatenate([np.zeros(n), np.ones(q)])
    a_ub = [np.hstack([-obj_rows, -np.eye(q)]), np.hstack([obj_rows, -np.eye(q)])]
    b_ub = [-obj_offsets, obj_offsets]
    if ineq.shape[0]:
        a_ub.append(np.hstack([ineq, np.zeros((ineq.shape[0], q))]))
        b_ub.append(ineq_rhs)
    a_ub = np.vstack(a_ub)
    b_ub = np.concatenate(b_ub)
    a_eq = np.hstack([eq, np.zeros((eq.shape[0], q))]) if eq.shape[0] else None
    b_eq = eq_rhs if eq.shape[0] else None

    def try_incumbent(y):
        nonlocal best_cost, best_y
        yi = _verify_binary(y, eq, eq_rhs, ineq, ineq_rhs)
        if yi is None:
            return
        cost = float(np.abs(obj_offsets - yi @ obj_rows.T).sum())
        if best_cost is None or cost < best_cost - 1e-9:
            best_cost, best_y = cost, yi

    best_cost = None
    best_y = None
    if initial_incumbent is not None:
        try_incumbent(np.asarray(initial_incumbent, dtype=float))
    stack = [(np.zeros(n), np.ones(n))]
    nodes = 0
    while stack:
        lo, hi = stack.pop()
        nodes += 1
        if nodes > _BNB_NODE_LIMIT:
            raise SolverError("rounding branch-and-bound exceeded its node budget")
        if node_candidate is not None:
            guess = node_candidate(lo, hi)
            if guess is not None:
                try_incumbent(np.asarray(guess, dtype=float))
        if node_bound is not None and best_cost is not None:
            # combinatorial bound from group-sum integrality; the LP bound
            # alone can be far weaker than any integral solution
            if node_bound(lo, hi) > best_cost - 1e-9:
                continue
        bounds = [(lo[i], hi[i]) for i in range(n)] + [(0, None)] * q
        res = linprog(
            c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs"
        )
        if res.status != 0 or res.x is None:
            continue
        if best_cost is not None and res.fun > best_cost - 1e-9:
            continue
        y = res.x[:n]
        frac = np.abs(y - np.rint(y))
        if frac.max(initial=0.0) < 1e-6:
            try_incumbent(y)
            continue
        # repair heuristic: a rounded LP point is often already feasible
        try_incumbent(np.rint(y))
        if best_cost is not None and node_bound is not None:
            if node_bound(lo, hi) > best_cost - 1e-9:
                continue
        pick = int(np.argmax(frac))
        lo0, hi0 = lo.copy(), hi.copy()
        lo1, hi1 = lo.copy(), hi.copy()
        hi0[pick] = 0.0
        lo1[pick] = 1.0
        # explore the branch nearer the LP value first
        if y[pick] >= 0.5:
            stack.append((lo0, hi0))
            stack.append((lo1, hi1))
        else:
            stack.append((lo1, hi1))
            stack.append((lo0, hi0))
    if best_y is None:
        raise InfeasibleProblemError("no 0/1 assignment satisfies the constraints")
    return best_y, best_cost


def solve_binary_rounding(obj_rows, obj_offsets, eq, eq_rhs, ineq, ineq_rhs,
                          node_bound=None, node_candidate=None,
                          initial_incumbent=None):
    """Minimize ``sum_r |offsets_r - (rows y)_r|`` over binary y.

    Constraint data must be integer-valued.  At or below
    ``EXHAUSTIVE_LIMIT`` free variables the minimum is found by vectorized
    enumeration with an exact lexicographic tie-break on the set of
    incremented positions; above it, by depth-first branch-and-bound on
    LP relaxations (first optimum found is kept).  ``node_bound(lo, hi)``
    may supply a problem-specific lower bound used for extra pruning, and
    ``initial_incumbent`` a candidate assignment to verify up front.
    """
    n = obj_rows.shape[1]
    if n == 0:
        return np.zeros(0, dtype=np.int64), float(np.abs(obj_offsets).sum())
    if n <= EXHAUSTIVE_LIMIT:
        return _exhaustive_binary(obj_rows, obj_offsets, eq, eq_rhs, ineq, ineq_rhs, n)
    return _bnb_binary(
        obj_rows, obj_offsets, eq, eq_rhs, ineq, ineq_rhs, n,
        node_bound=node_bound, node_candidate=node_candidate,
        initial_incumbent=initial_incumbent,
    )
