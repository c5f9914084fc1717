"""Independent oracles used to freeze expected values.

Everything here is deliberately written against plain numpy/scipy dense
formulas, not the package's succinct or tree-structured paths, so a test
comparing the two exercises genuinely different code.
"""

import numpy as np


def dense_p0(d):
    return np.eye(d) - np.ones((d, d)) / d


def dense_p1(d):
    return np.ones((d, d)) / d


def materialize_succinct(a, b, d):
    return np.kron(np.asarray(a, float), dense_p0(d)) + np.kron(
        np.asarray(b, float), dense_p1(d)
    )


def check_moore_penrose(m, pinv, tol=1e-9):
    """All four defining conditions of the pseudoinverse."""
    m = np.asarray(m, float)
    pinv = np.asarray(pinv, float)
    scale = 1.0 + np.abs(m).max(initial=0.0)
    assert np.allclose(m @ pinv @ m, m, atol=tol * scale)
    assert np.allclose(pinv @ m @ pinv, pinv, atol=tol * scale)
    assert np.allclose(m @ pinv, (m @ pinv).T, atol=tol * scale)
    assert np.allclose(pinv @ m, (pinv @ m).T, atol=tol * scale)


def dense_gls(w, variances, y):
    w = np.asarray(w, float)
    sinv = 1.0 / np.asarray(variances, float)
    info = w.T @ (sinv[:, None] * w)
    cov = np.linalg.inv(info)
    x = cov @ (w.T @ (sinv * y))
    return x, 0.5 * (cov + cov.T)


def dense_ecgls(w, variances, y, req, rval):
    """Equality-constrained GLS via the textbook projection formula.

    Uses a pseudoinverse for the constraint Gram matrix so redundant rows
    (as arise in whole-tree systems) are handled.
    """
    x, cov = dense_gls(w, variances, y)
    req = np.asarray(req, float)
    if req.shape[0] == 0:
        return x, cov
    rval = np.asarray(rval, float)
    gram = req @ cov @ req.T
    gain = cov @ req.T @ np.linalg.pinv(gram, rcond=1e-12)
    x = x - gain @ (req @ x - rval)
    cov = cov - gain @ req @ cov
    return x, 0.5 * (cov + cov.T)


def assemble_tree_problem(tree, measurements_by_node):
    """Materialize the whole-tree regression: block workload, variances,
    stacked observations, and all equality rows (per-node + consistency).

    Returns (w, variances, y, req, rval, index) where ``index`` maps node
    id to its variable slice.
    """
    ids = sorted(tree.nodes)
    n = tree.bucket_space.size
    index = {node_id: slice(i * n, (i + 1) * n) for i, node_id in enumerate(ids)}
    nv = len(ids) * n
    d = tree.bucket_space.sym_card

    w_blocks, variances, y = [], [], []
    for node_id in ids:
        node = tree.nodes[node_id]
        m = measurements_by_node[node_id]
        rows = []
        var = []
        obs = []
        i1 = i2 = 0
        for q in tree.query_types:
            v = q.variance_at(node.level)
            if q.kind == "individual":
                block = np.kron(q.selector, np.eye(d))
                take = q.selector.shape[0] * d
                obs.extend(m.y1[i1 : i1 + take])
                i1 += take
            else:
                block = np.kron(q.selector, np.ones((1, d)))
                take = q.selector.shape[0]
                obs.extend(m.y2[i2 : i2 + take])
                i2 += take
            rows.append(block)
            var.extend([v] * block.shape[0])
        w_blocks.append(np.vstack(rows))
        variances.extend(var)
        y.extend(obs)

    total_rows = sum(b.shape[0] for b in w_blocks)
    w = np.zeros((total_rows, nv))
    r0 = 0
    for node_id, block in zip(ids, w_blocks):
        w[r0 : r0 + block.shape[0], index[node_id]] = block
        r0 += block.shape[0]

    req_rows, rval = [], []
    for node_id in ids:
        cs = tree.nodes[node_id].constraints
        mat = cs.req
        for i in range(mat.shape[0]):
            row = np.zeros(nv)
            row[index[node_id]] = mat[i]
            req_rows.append(row)
            rval.append(cs.rval[i])
    for node_id in ids:
        node = tree.nodes[node_id]
        if not node.children:
            continue
        for b in range(n):
            row = np.zeros(nv)
            row[index[node_id]][b] = 1.0
            for child in node.children:
                row[index[child]][b] = -1.0
            req_rows.append(row)
            rval.append(0.0)
    req = np.vstack(req_rows) if req_rows else np.zeros((0, nv))
    return (
        w,
        np.asarray(variances, float),
        np.asarray(y, float),
        req,
        np.asarray(rval, float),
        index,
    )


def dense_tree_blue(tree, measurements):
    """Whole-problem dense ECGLS; returns per-node estimates and covariance
    diagonal blocks."""
    by_node = {m.node_id: m for m in measurements}
    w, variances, y, req, rval, index = assemble_tree_problem(tree, by_node)
    x, cov = dense_ecgls(w, variances, y, req, rval)
    estimates = {node_id: x[sl] for node_id, sl in index.items()}
    blocks = {node_id: cov[sl, sl] for node_id, sl in index.items()}
    return estimates, blocks


def dgauss_pmf(mu, sigma2, halfwidth=None):
    """Directly normalized discrete Gaussian PMF on a truncated support."""
    if halfwidth is None:
        halfwidth = max(40, int(20 * np.sqrt(sigma2)) + 1)
    xs = np.arange(mu - halfwidth, mu + halfwidth + 1)
    logp = -((xs - mu) ** 2) / (2.0 * sigma2)
    p = np.exp(logp - logp.max())
    return xs, p / p.sum()


def project_box_halfspaces(point, eq, eq_rhs, ineq, ineq_rhs, iters=400):
    """Dykstra's alternating projections onto {eq x = rhs} and each
    halfspace {a x <= b}; converges to the Euclidean projection."""
    x = point.copy()
    n_sets = 1 + ineq.shape[0]
    increments = [np.zeros_like(x) for _ in range(n_sets)]
    eq_pinv = np.linalg.pinv(eq, rcond=1e-12) if eq.shape[0] else None
    for _ in range(iters):
        moved = 0.0
        for s in range(n_sets):
            y = x + increments[s]
            if s == 0:
                proj = y - eq_pinv @ (eq @ y - eq_rhs) if eq.shape[0] else y
            else:
                a = ineq[s - 1]
                b = ineq_rhs[s - 1]
                viol = a @ y - b
                proj = y - a * (viol / (a @ a)) if viol > 0 else y
            increments[s] = y - proj
            moved = max(moved, float(np.abs(proj - x).max(initial=0.0)))
            x = proj
        if moved < 1e-14:
            break
    return x


def reference_qp_objective(h_builder, eq, eq_rhs, ineq, ineq_rhs, x0, iters=4000):
    """Accelerated projected gradient on the z-space QP; returns the
    objective value reached (reference for relative-objective checks).

    ``h_builder`` returns (objective value, gradient) at a point.
    """
    x = project_box_halfspaces(x0, eq, eq_rhs, ineq, ineq_rhs)
    v = x.copy()
    t = 1.0
    # crude Lipschitz estimate via a few random probes of the gradient map
    rng = np.random.default_rng(0)
    lip = 1e-9
    for _ in range(8):
        u1 = rng.standard_normal(x.size)
        _, g1 = h_builder(x + 1e-3 * u1)
        _, g0 = h_builder(x)
        lip = max(lip, np.linalg.norm(g1 - g0) / (1e-3 * np.linalg.norm(u1)))
    step = 1.0 / (2.0 * lip)
    best = h_builder(x)[0]
    for _ in range(iters):
        _, grad = h_builder(v)
        x_next = project_box_halfspaces(
            v - step * grad, eq, eq_rhs, ineq, ineq_rhs, iters=120
        )
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        v = x_next + ((t - 1.0) / t_next) * (x_next - x)
        x, t = x_next, t_next
        best = min(best, h_builder(x)[0])
    return best
