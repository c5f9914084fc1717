"""Geocode tree, demographic buckets, workloads, constraints and instances.

Buckets factor into an asymmetric part (cardinality ``asym_card``, queried
with arbitrary selectors) and a symmetric part (cardinality ``sym_card``,
always either sliced per value or aggregated over all values).  A per-node
workload stacks query types of two kinds:

* ``individual``: rows ``selector (x) I`` - one query per symmetric value,
* ``aggregate``:  rows ``selector (x) 1^T`` - summed over symmetric values,

and the per-node equality constraints follow the same two structured forms.
"""

import json

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GenerationError, RankError, SchemaError

INDIVIDUAL = "individual"
AGGREGATE = "aggregate"


@dataclass(frozen=True)
class BucketSpace:
    """Product bucket space of asymmetric and symmetric features."""

    asym_card: int
    sym_card: int
    asym_factors: tuple = ()
    asym_labels: tuple = ()
    sym_labels: tuple = ()

    def __post_init__(self):
        if self.asym_card < 1 or self.sym_card < 1:
            raise SchemaError("bucket cardinalities must be >= 1")
        factors = tuple(self.asym_factors) or (self.asym_card,)
        if int(np.prod(factors)) != self.asym_card:
            raise SchemaError(
                f"asym_factors {factors} do not multiply to asym_card {self.asym_card}"
            )
        object.__setattr__(self, "asym_factors", factors)
        if not self.asym_labels:
            object.__setattr__(
                self, "asym_labels", tuple(f"a{i}" for i in range(self.asym_card))
            )
        if not self.sym_labels:
            object.__setattr__(
                self, "sym_labels", tuple(f"s{i}" for i in range(self.sym_card))
            )

    @property
    def size(self):
        return self.asym_card * self.sym_card


def census_bucket_space():
    """The production-shaped bucket space: 8*2*2 asymmetric values, 63 symmetric."""
    return BucketSpace(asym_card=32, sym_card=63, asym_factors=(8, 2, 2))


@dataclass(frozen=True)
class QueryType:
    """One family of per-node linear queries sharing a noise scale per level.

    ``selector`` has one row per query over the asymmetric dimension.  An
    ``individual`` query is repeated for every symmetric value; an
    ``aggregate`` query sums over them.
    """

    name: str
    kind: str
    selector: np.ndarray
    noise_variance_by_level: dict = field(default_factory=dict)
    default_variance: float = 1.0

    def __post_init__(self):
        if self.kind not in (INDIVIDUAL, AGGREGATE):
            raise SchemaError(f"unknown query kind {self.kind!r}")
        sel = np.asarray(self.selector, dtype=float)
        if sel.ndim != 2:
            raise SchemaError(f"selector of {self.name!r} must be 2-d")
        sel = sel.copy()
        sel.setflags(write=False)
        object.__setattr__(self, "selector", sel)

    def variance_at(self, level):
        var = float(self.noise_variance_by_level.get(level, self.default_variance))
        if var <= 0:
            raise SchemaError(f"variance of {self.name!r} at level {level} must be > 0")
        return var

    def materialized_rows(self, sym_card):
        n = self.selector.shape[0]
        return n * sym_card if self.kind == INDIVIDUAL else n


def asym_marginal_selector(factors, keep):
    """0/1 rows marginalizing the asymmetric factors not in ``keep``.

    One row per combination of the kept factors' values, in row-major order
    of the factor tuple.
    """
    factors = tuple(factors)
    keep = tuple(sorted(keep))
    card = int(np.prod(factors))
    idx = np.array(list(np.ndindex(*factors)))  # (card, n_factors)
    kept_vals = idx[:, keep] if keep else np.zeros((card, 0), dtype=int)
    shape = tuple(factors[i] for i in keep)
    n_rows = int(np.prod(shape)) if shape else 1
    rows = np.zeros((n_rows, card))
    flat = np.ravel_multi_index(kept_vals.T, shape) if shape else np.zeros(card, dtype=int)
    rows[flat, np.arange(card)] = 1.0
    return rows


def census_query_types(variances=None):
    """The full production-shaped per-node workload (2603 queries).

    ``variances`` optionally maps query name to a per-level dict; every
    query defaults to variance 1.0 at every level.
    """
    factors = (8, 2, 2)
    variances = variances or {}

    def mk(name, kind, selector):
        return QueryType(
            name=name,
            kind=kind,
            selector=selector,
            noise_variance_by_level=dict(variances.get(name, {})),
        )

    ones = asym_marginal_selector(factors, ())
    hhinst = np.zeros((3, 32))
    groups = ([0], [1, 2, 3, 4], [5, 6, 7])
    hh_marginal = asym_marginal_selector(factors, (0,))
    for gi, members in enumerate(groups):
        hhinst[gi] = hh_marginal[members].sum(axis=0)
    return [
        mk("total", AGGREGATE, ones),
        mk("cenrace", INDIVIDUAL, ones),
        mk("hispanic", AGGREGATE, asym_marginal_selector(factors, (1,))),
        mk("votingage", AGGREGATE, asym_marginal_selector(factors, (2,))),
        mk("hhinstlevels", AGGREGATE, hhinst),
        mk("hhgq", AGGREGATE, hh_marginal),
        mk("hispanic_x_cenrace", INDIVIDUAL, asym_marginal_selector(factors, (1,))),
        mk("votingage_x_cenrace", INDIVIDUAL, asym_marginal_selector(factors, (2,))),
        mk("votingage_x_hispanic", AGGREGATE, asym_marginal_selector(factors, (1, 2))),
        mk(
            "votingage_x_hispanic_x_cenrace",
            INDIVIDUAL,
            asym_marginal_selector(factors, (1, 2)),
        ),
        mk("detailed", INDIVIDUAL, np.eye(32)),
    ]


@dataclass(frozen=True)
class ConstraintSet:
    """Per-node equality (R, r) and inequality (G, g) systems over buckets.

    Equalities are stored in the structured split form: ``r1`` rows slice
    the symmetric feature (each expands to ``sym_card`` materialized rows),
    ``r2`` rows aggregate over it.  ``req``/``rval`` materialize the full
    system in that block order.
    """

    r1: np.ndarray
    rvals1: np.ndarray
    r2: np.ndarray
    rvals2: np.ndarray
    gineq: np.ndarray
    gval: np.ndarray
    sym_card: int

    def __post_init__(self):
        for name in ("r1", "rvals1", "r2", "rvals2", "gineq", "gval"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.r1.ndim != 2 or self.r2.ndim != 2 or self.gineq.ndim != 2:
            raise SchemaError("constraint matrices must be 2-d")
        if self.r1.shape[0] * self.sym_card != self.rvals1.size:
            raise SchemaError("rvals1 length must be r1 rows times sym_card")
        if self.r2.shape[0] != self.rvals2.size:
            raise SchemaError("rvals2 length must match r2 rows")
        if self.gineq.shape[0] != self.gval.size:
            raise SchemaError("gval length must match gineq rows")
        stacked = np.vstack([self.r1, self.r2])
        if stacked.shape[0]:
            rank = np.linalg.matrix_rank(stacked, tol=1e-10)
            if rank < stacked.shape[0]:
                raise SchemaError("equality constraint factors are rank-deficient")

    @classmethod
    def empty(cls, asym_card, sym_card):
        n = asym_card * sym_card
        return cls(
            r1=np.zeros((0, asym_card)),
            rvals1=np.zeros(0),
            r2=np.zeros((0, asym_card)),
            rvals2=np.zeros(0),
            gineq=np.zeros((0, n)),
            gval=np.zeros(0),
            sym_card=sym_card,
        )

    @property
    def is_empty(self):
        return not (self.r1.shape[0] or self.r2.shape[0] or self.gineq.shape[0])

    @property
    def n_equalities(self):
        return self.r1.shape[0] * self.sym_card + self.r2.shape[0]

    @property
    def req(self):
        """Materialized equality matrix ``[r1 (x) I; r2 (x) 1^T]`` over buckets."""
        d = self.sym_card
        blocks = []
        if self.r1.shape[0]:
            blocks.append(np.kron(self.r1, np.eye(d)))
        if self.r2.shape[0]:
            blocks.append(np.kron(self.r2, np.ones((1, d))))
        if not blocks:
            return np.zeros((0, self.r1.shape[1] * d))
        return np.vstack(blocks)

    @property
    def rval(self):
        return np.concatenate([self.rvals1, self.rvals2])


def split_constraints(cs):
    """Return the structured factors ``(r1, r2, rvals1, rvals2)`` of ``cs``.

    The stored factors reassemble to ``cs.req`` exactly by construction.
    """
    return cs.r1, cs.r2, cs.rvals1, cs.rvals2


def factor_equality_rows(req, rval, asym_card, sym_card):
    """Factor a dense equality system into the two structured row forms.

    Rows of the form ``w (x) e_j`` must appear for every symmetric value j
    with a shared ``w`` (the symmetric-sliced form); rows of the form
    ``w (x) 1^T`` aggregate.  Any other row raises ``SchemaError``.
    """
    req = np.asarray(req, dtype=float)
    rval = np.asarray(rval, dtype=float).ravel()
    d = sym_card
    r1_rows, rvals1, r2_rows, rvals2 = [], {}, [], []
    pending = {}
    for row, val in zip(req, rval):
        v = row.reshape(asym_card, d)
        col_norms = np.abs(v).sum(axis=0)
        support = np.nonzero(col_norms > 1e-12)[0]
        if support.size == 0:
            continue
        if support.size == 1:
            j = int(support[0])
            w = v[:, j]
            key = tuple(np.round(w, 12))
            pending.setdefault(key, {})[j] = float(val)
        elif support.size == d and np.allclose(v, v[:, [0]] @ np.ones((1, d)), atol=1e-12):
            r2_rows.append(v[:, 0].copy())
            rvals2.append(float(val))
        else:
            raise SchemaError(
                "equality row fits neither the sliced nor the aggregated form"
            )
    for key, by_sym in pending.items():
        if len(by_sym) != d:
            raise SchemaError(
                "sliced equality rows must cover every symmetric value of a selector"
            )
        r1_rows.append(np.array(key, dtype=float))
        rvals1[len(r1_rows) - 1] = [by_sym[j] for j in range(d)]
    r1 = np.array(r1_rows).reshape(len(r1_rows), asym_card)
    r2 = np.array(r2_rows).reshape(len(r2_rows), asym_card)
    v1 = np.concatenate([rvals1[i] for i in range(len(r1_rows))]) if r1_rows else np.zeros(0)
    return r1, r2, np.asarray(v1, dtype=float), np.asarray(rvals2, dtype=float)


@dataclass
class GeoNode:
    """A node of the geocode tree."""

    id: str
    level: int
    parent: str | None
    children: list
    constraints: ConstraintSet
    truth: np.ndarray | None = None

    @property
    def is_leaf(self):
        return not self.children


@dataclass
class GeoTree:
    """The geocode hierarchy with its bucket space and per-level workload."""

    bucket_space: BucketSpace
    query_types: list
    nodes: dict
    root_id: str = "0"
    passes_per_level: list | None = None

    def __post_init__(self):
        self.query_types = list(self.query_types)
        self._by_name = {q.name: q for q in self.query_types}
        if len(self._by_name) != len(self.query_types):
            raise SchemaError("query type names must be unique")

    @property
    def n_levels(self):
        return 1 + max(n.level for n in self.nodes.values())

    def node(self, node_id):
        return self.nodes[node_id]

    def query_type(self, name):
        return self._by_name[name]

    def sorted_ids(self):
        return sorted(self.nodes)

    def nodes_at_level(self, level):
        return [self.nodes[i] for i in self.sorted_ids() if self.nodes[i].level == level]

    def leaves(self):
        return [self.nodes[i] for i in self.sorted_ids() if self.nodes[i].is_leaf]

    def internal_ids_by_depth(self):
        ids = [i for i in self.sorted_ids() if self.nodes[i].children]
        return sorted(ids, key=lambda i: (self.nodes[i].level, i))

    def validate_truth(self):
        """Check internal truths are child sums and constraints hold exactly."""
        for node in self.nodes.values():
            if node.truth is None:
                raise SchemaError(f"node {node.id} has no truth")
            if node.children:
                total = sum(self.nodes[c].truth for c in node.children)
                if not np.array_equal(total, node.truth):
                    raise SchemaError(f"truth of {node.id} is not the sum of children")
            cs = node.constraints
            if cs.n_equalities:
                if not np.allclose(cs.req @ node.truth, cs.rval, atol=1e-9):
                    raise SchemaError(f"truth of {node.id} violates equalities")
            if cs.gineq.shape[0]:
                if np.any(cs.gineq @ node.truth > cs.gval + 1e-9):
                    raise SchemaError(f"truth of {node.id} violates inequalities")


@dataclass(frozen=True)
class NodeWorkload:
    """Stacked per-node workload factors and per-row noise variances.

    ``w1``/``var1`` cover the individual (symmetric-sliced) rows and
    ``w2``/``var2`` the aggregate rows; the materialized workload is
    ``[w1 (x) I; w2 (x) 1^T]`` with covariance ``diag(var1) (x) I`` on the
    first block.
    """

    w1: np.ndarray
    w2: np.ndarray
    var1: np.ndarray
    var2: np.ndarray
    sym_card: int
    query_slices: tuple  # (name, kind, start, rows) in stacking order

    @property
    def asym_card(self):
        return self.w1.shape[1] if self.w1.size else self.w2.shape[1]

    def to_dense(self):
        d = self.sym_card
        blocks = []
        if self.w1.shape[0]:
            blocks.append(np.kron(self.w1, np.eye(d)))
        if self.w2.shape[0]:
            blocks.append(np.kron(self.w2, np.ones((1, d))))
        return np.vstack(blocks)

    def dense_variances(self):
        d = self.sym_card
        return np.concatenate([np.repeat(self.var1, d), self.var2])


def node_workload(tree, node):
    """Assemble the (w1, w2, var1, var2) workload of ``node`` at its level.

    Raises ``RankError`` unless the combined workload has full column rank
    over the bucket space (guaranteed when a detailed query is present).
    """
    if isinstance(node, str):
        node = tree.node(node)
    d = tree.bucket_space.sym_card
    w1, v1, w2, v2 = [], [], [], []
    slices = []
    for q in tree.query_types:
        var = q.variance_at(node.level)
        n = q.selector.shape[0]
        if q.kind == INDIVIDUAL:
            slices.append((q.name, q.kind, sum(x.shape[0] for x in w1), n))
            w1.append(q.selector)
            v1.extend([var] * n)
        else:
            slices.append((q.name, q.kind, sum(x.shape[0] for x in w2), n))
            w2.append(q.selector)
            v2.extend([var] * n)
    k = tree.bucket_space.asym_card
    w1m = np.vstack(w1) if w1 else np.zeros((0, k))
    w2m = np.vstack(w2) if w2 else np.zeros((0, k))
    if w1m.shape[0] == 0 or np.linalg.matrix_rank(w1m, tol=1e-10) < k:
        raise RankError(
            f"workload at node {node.id} lacks full column rank over the "
            "asymmetric buckets; include a detailed query"
        )
    return NodeWorkload(
        w1=w1m,
        w2=w2m,
        var1=np.asarray(v1, dtype=float),
        var2=np.asarray(v2, dtype=float),
        sym_card=d,
        query_slices=tuple(slices),
    )


@dataclass(frozen=True)
class ConstraintPolicy:
    """Parameters controlling truth sampling and derived constraints.

    Zero asymmetric slices yield equality-to-zero rows; ``exact_total_levels``
    lists the levels whose node totals are released exactly; occupied slices
    get a lower bound of one person per occupied leaf (and optionally an
    upper bound of ``slice_upper_cap`` per occupied leaf).
    """

    zero_rate: float = 0.0
    count_dist: str = "geometric"
    count_mean: float = 8.0
    count_value: int = 5
    exact_total_levels: tuple = (0,)
    slice_lower_bounds: bool = False
    slice_upper_cap: int | None = None

    def sample_counts(self, rng, n):
        if self.count_dist == "constant":
            return np.full(n, int(self.count_value), dtype=np.int64)
        if self.count_dist == "geometric":
            p = 1.0 / (self.count_mean + 1.0)
            return rng.geometric(p, size=n).astype(np.int64) - 1
        raise SchemaError(f"unknown count distribution {self.count_dist!r}")


@dataclass(frozen=True)
class InstanceSpec:
    """Deterministic recipe for a synthetic instance."""

    seed: int
    level_arities: tuple
    bucket_space: BucketSpace
    query_types: tuple
    constraint_policy: ConstraintPolicy = ConstraintPolicy()
    passes_per_level: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "level_arities", tuple(int(a) for a in self.level_arities))
        object.__setattr__(self, "query_types", tuple(self.query_types))
        if any(a < 1 for a in self.level_arities):
            raise SchemaError("level arities must be >= 1")
        if self.passes_per_level is not None:
            object.__setattr__(
                self,
                "passes_per_level",
                tuple(tuple(p) for p in self.passes_per_level),
            )


def _leaf_occupancy(tree):
    """Per-node count of occupied leaf slices, additive up the tree."""
    occ = {}
    order = sorted(tree.nodes.values(), key=lambda n: -n.level)
    ba, d = tree.bucket_space.asym_card, tree.bucket_space.sym_card
    for node in order:
        if node.is_leaf:
            slices = node.truth.reshape(ba, d).sum(axis=1)
            occ[node.id] = (slices > 0).astype(np.int64)
        else:
            occ[node.id] = sum(occ[c] for c in node.children)
    return occ


def derive_constraints(tree, policy):
    """Attach per-node constraint systems derived from the truth.

    Zero slices become sliced equality rows; totals at the policy's exact
    levels become aggregated equality rows (omitted when implied by zero
    rows); occupancy bounds become inequality rows.  The derived rows hold
    on the truth exactly and propagate implied constraints upward because
    internal truths are child sums of nonnegative counts.
    """
    ba, d = tree.bucket_space.asym_card, tree.bucket_space.sym_card
    occ = _leaf_occupancy(tree) if (policy.slice_lower_bounds or policy.slice_upper_cap) else None
    for node in tree.nodes.values():
        x = node.truth.reshape(ba, d)
        slice_totals = x.sum(axis=1)
        zero = np.nonzero(slice_totals == 0)[0]
        r1 = np.zeros((zero.size, ba))
        r1[np.arange(zero.size), zero] = 1.0
        rvals1 = np.zeros(zero.size * d)
        r2_rows, rvals2 = [], []
        if node.level in policy.exact_total_levels and zero.size < ba:
            r2_rows.append(np.ones(ba))
            rvals2.append(float(x.sum()))
        g_rows, g_vals = [], []
        if occ is not None:
            f = occ[node.id]
            slice_row = np.kron(np.eye(ba), np.ones((1, d)))
            for a in range(ba):
                if f[a] == 0:
                    continue
                if policy.slice_lower_bounds:
                    g_rows.append(-slice_row[a])
                    g_vals.append(-float(f[a]))
                if policy.slice_upper_cap is not None:
                    cap = float(policy.slice_upper_cap * f[a])
                    if slice_totals[a] > cap:
                        raise GenerationError(
                            f"slice cap {policy.slice_upper_cap} infeasible at "
                            f"node {node.id}: true slice total {slice_totals[a]} "
                            f"exceeds {cap}"
                        )
                    g_rows.append(slice_row[a])
                    g_vals.append(cap)
        node.constraints = ConstraintSet(
            r1=r1,
            rvals1=rvals1,
            r2=np.array(r2_rows).reshape(len(r2_rows), ba),
            rvals2=np.asarray(rvals2, dtype=float),
            gineq=np.array(g_rows).reshape(len(g_rows), ba * d),
            gval=np.asarray(g_vals, dtype=float),
            sym_card=d,
        )


def build_instance(spec):
    """Generate the tree, sample leaf truths and derive all constraints.

    Deterministic: the same spec and seed produce a bit-identical instance.
    """
    bs = spec.bucket_space
    rng = np.random.default_rng(spec.seed)
    nodes = {}
    root = GeoNode(id="0", level=0, parent=None, children=[],
                   constraints=ConstraintSet.empty(bs.asym_card, bs.sym_card))
    nodes[root.id] = root
    frontier = [root]
    for level, arity in enumerate(spec.level_arities, start=1):
        nxt = []
        for parent in frontier:
            for i in range(arity):
                child = GeoNode(
                    id=f"{parent.id}/{i}",
                    level=level,
                    parent=parent.id,
                    children=[],
                    constraints=ConstraintSet.empty(bs.asym_card, bs.sym_card),
                )
                parent.children.append(child.id)
                nodes[child.id] = child
                nxt.append(child)
        frontier = nxt
    for node in nodes.values():
        node.children.sort()
    tree = GeoTree(
        bucket_space=bs,
        query_types=list(spec.query_types),
        nodes=nodes,
        passes_per_level=list(spec.passes_per_level) if spec.passes_per_level else None,
    )

    policy = spec.constraint_policy
    for leaf in tree.leaves():
        counts = np.zeros((bs.asym_card, bs.sym_card), dtype=np.int64)
        for a in range(bs.asym_card):
            if policy.zero_rate > 0 and rng.random() < policy.zero_rate:
                continue
            counts[a] = policy.sample_counts(rng, bs.sym_card)
        leaf.truth = counts.ravel()
    for node in sorted(tree.nodes.values(), key=lambda n: -n.level):
        if node.children:
            node.truth = sum(tree.nodes[c].truth for c in node.children)

    derive_constraints(tree, policy)
    tree.validate_truth()
    return tree


# ---------------------------------------------------------------------------
# Instance spec files (TOML) and tree serialization (NDJSON)
# ---------------------------------------------------------------------------

_SHORTHAND_SELECTORS = ("identity", "total")


def _resolve_selector(raw, bucket_space):
    if isinstance(raw, str):
        if raw == "identity":
            return np.eye(bucket_space.asym_card)
        if raw == "total":
            return np.ones((1, bucket_space.asym_card))
        raise SchemaError(
            f"unknown selector shorthand {raw!r}; use one of {_SHORTHAND_SELECTORS} "
            "or an explicit list of rows"
        )
    sel = np.asarray(raw, dtype=float)
    if sel.ndim == 1:
        sel = sel.reshape(1, -1)
    if sel.shape[1] != bucket_space.asym_card:
        raise SchemaError(
            f"selector has {sel.shape[1]} columns, expected {bucket_space.asym_card}"
        )
    return sel


def parse_instance_spec(data):
    """Build an InstanceSpec from a parsed spec document (dict)."""
    try:
        bs_data = data.get("bucket_space", {})
        if bs_data.get("preset") == "census":
            bs = census_bucket_space()
        else:
            bs = BucketSpace(
                asym_card=int(bs_data["asym_card"]),
                sym_card=int(bs_data["sym_card"]),
                asym_factors=tuple(bs_data.get("asym_factors", ())),
            )
        if data.get("query_preset") == "census":
            queries = census_query_types()
        else:
            queries = []
            for q in data.get("query_types", []):
                variances = {int(k): float(v) for k, v in q.get("noise_variance", {}).items()}
                queries.append(
                    QueryType(
                        name=q["name"],
                        kind=q["kind"],
                        selector=_resolve_selector(q["selector"], bs),
                        noise_variance_by_level=variances,
                        default_variance=float(q.get("default_variance", 1.0)),
                    )
                )
        pol = data.get("constraint_policy", {})
        policy = ConstraintPolicy(
            zero_rate=float(pol.get("zero_rate", 0.0)),
            count_dist=pol.get("count_dist", "geometric"),
            count_mean=float(pol.get("count_mean", 8.0)),
            count_value=int(pol.get("count_value", 5)),
            exact_total_levels=tuple(pol.get("exact_total_levels", [0])),
            slice_lower_bounds=bool(pol.get("slice_lower_bounds", False)),
            slice_upper_cap=(
                int(pol["slice_upper_cap"]) if pol.get("slice_upper_cap") else None
            ),
        )
        passes = data.get("passes")
        return InstanceSpec(
            seed=int(data["seed"]),
            level_arities=tuple(data["level_arities"]),
            bucket_space=bs,
            query_types=tuple(queries),
            constraint_policy=policy,
            passes_per_level=tuple(tuple(p) for p in passes) if passes else None,
        )
    except KeyError as exc:
        raise SchemaError(f"instance spec is missing required key {exc}") from exc


def load_instance_spec(path):
    with open(path, "rb") as fh:
        return parse_instance_spec(tomllib.load(fh))


def with_seed(spec, seed):
    return replace(spec, seed=int(seed))


def write_tree(tree, path):
    """Serialize topology + truth, one record per node in id order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for node_id in tree.sorted_ids():
            node = tree.nodes[node_id]
            record = {
                "id": node.id,
                "level": node.level,
                "parent": node.parent,
                "truth": [int(v) for v in node.truth],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_tree(path, spec):
    """Rebuild a tree from a serialized file and its instance spec.

    Constraints are re-derived from the stored truth under the spec's
    policy, which is how they were produced in the first place.
    """
    bs = spec.bucket_space
    nodes = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            truth = np.asarray(rec["truth"], dtype=np.int64)
            if truth.size != bs.size:
                raise SchemaError(
                    f"node {rec['id']} has truth of length {truth.size}, "
                    f"expected {bs.size}"
                )
            nodes[rec["id"]] = GeoNode(
                id=rec["id"],
                level=int(rec["level"]),
                parent=rec["parent"],
                children=[],
                constraints=ConstraintSet.empty(bs.asym_card, bs.sym_card),
                truth=truth,
            )
    for node in nodes.values():
        if node.parent is not None:
            nodes[node.parent].children.append(node.id)
    for node in nodes.values():
        node.children.sort()
    tree = GeoTree(
        bucket_space=bs,
        query_types=list(spec.query_types),
        nodes=nodes,
        passes_per_level=list(spec.passes_per_level) if spec.passes_per_level else None,
    )
    derive_constraints(tree, spec.constraint_policy)
    tree.validate_truth()
    return tree
