"""Exact discrete Gaussian sampling and noisy tree measurement.

The sampler follows the standard exact construction: a discrete Laplace
proposal built from Bernoulli(exp(-x)) coin flips over rationals, thinned
by rejection to the discrete Gaussian.  All arithmetic is on integers, so
the output distribution is the target one exactly (for the rational value
of the requested variance), not a rounding of a continuous Gaussian.
"""

import hashlib
import json
import random
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import SchemaError, UsageError
from .schema import INDIVIDUAL

__all__ = [
    "RngState",
    "NoisyMeasurement",
    "sample_discrete_gaussian",
    "measure_tree",
    "measurements_by_node",
    "write_measurements",
    "read_measurements",
]


def _bernoulli(num, den, rng):
    """One draw of Bernoulli(num/den) for integers 0 <= num <= den."""
    return rng.randrange(den) < num


def _bernoulli_exp_leq1(num, den, rng):
    """Bernoulli(exp(-num/den)) for 0 <= num <= den."""
    if num == 0:
        return True
    k = 1
    while _bernoulli(num, den * k, rng):
        k += 1
    return k % 2 == 1


def _bernoulli_exp(num, den, rng):
    """Bernoulli(exp(-num/den)) for num, den >= 0."""
    while num > den:
        if not _bernoulli_exp_leq1(1, 1, rng):
            return False
        num -= den
    return _bernoulli_exp_leq1(num, den, rng)


def _geometric_exp(num, den, rng):
    """Geometric(1 - exp(-num/den)) on {0, 1, ...} for num, den >= 1."""
    if den == 1:
        u = 0  # the uniform draw over [0, 1) is always 0 and always accepted
    else:
        while True:
            u = rng.randrange(den)
            if _bernoulli_exp(u, den, rng):
                break
    v = 0
    while _bernoulli_exp_leq1(1, 1, rng):
        v += 1
    return (v * den + u) // num


def _discrete_laplace(t, rng):
    """Two-sided geometric with scale t: P(x) proportional to exp(-|x|/t)."""
    while True:
        negative = rng.randrange(2)
        magnitude = _geometric_exp(1, t, rng)
        if negative and magnitude == 0:
            continue
        return -magnitude if negative else magnitude


def _floorsqrt(frac):
    """floor(sqrt(x)) for a nonnegative rational, by binary search."""
    a, b = 0, 1
    while b * b <= frac:
        b *= 2
    while a + 1 < b:
        c = (a + b) // 2
        if c * c <= frac:
            a = c
        else:
            b = c
    return a


class _DGaussParams:
    """Per-variance constants of the rejection sampler, cached.

    For variance p/q and proposal scale t, a discrete Laplace draw c is
    accepted with probability exp(-(|c| t q - p)^2 / (2 p q t^2)); the
    numerator is cached per |c| since only a handful of magnitudes occur.
    """

    _cache = {}

    def __new__(cls, sigma2):
        frac = Fraction(sigma2)
        if frac <= 0:
            raise SchemaError(f"sigma2 must be positive, got {sigma2}")
        hit = cls._cache.get(frac)
        if hit is not None:
            return hit
        self = super().__new__(cls)
        self.p = frac.numerator
        self.q = frac.denominator
        self.t = _floorsqrt(frac) + 1
        self.den = 2 * self.p * self.q * self.t * self.t
        self._bias_num = {}
        cls._cache[frac] = self
        return self

    def bias_numerator(self, magnitude):
        num = self._bias_num.get(magnitude)
        if num is None:
            num = (magnitude * self.t * self.q - self.p) ** 2
            self._bias_num[magnitude] = num
        return num


def sample_discrete_gaussian(mu, sigma2, rng):
    """Exact draw from the discrete Gaussian on the integers.

    P(X = x) is proportional to exp(-(x - mu)^2 / (2 sigma2)) for integer
    x; ``mu`` must be an integer and ``rng`` a ``random.Random`` (or an
    object with ``randrange``).

    Parameters
    ----------
    mu : int
        Center of the distribution.
    sigma2 : float or Fraction
        Variance parameter (> 0); floats are used at their exact binary
        rational value.
    rng : random.Random
    """
    params = _DGaussParams(sigma2)
    while True:
        candidate = _discrete_laplace(params.t, rng)
        num = params.bias_numerator(abs(candidate))
        if _bernoulli_exp(num, params.den, rng):
            return int(mu) + candidate


@dataclass(frozen=True)
class RngState:
    """Deterministic seed plus a derived stream identifier.

    Streams are derived by hashing labels, so the noise of one node/row is
    unaffected by the presence of any other.
    """

    seed: int
    stream: int = 0

    def derive(self, *labels):
        text = f"{self.seed}|{self.stream}|" + "|".join(str(x) for x in labels)
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        return RngState(seed=self.seed, stream=int.from_bytes(digest[:16], "big"))

    def to_random(self):
        return random.Random(self.stream if self.stream else self.seed)


@dataclass(frozen=True)
class NoisyMeasurement:
    """Per-node noisy workload readings split by row kind.

    ``y1``/``sigma1_diag`` cover the materialized individual rows (selector
    row major, symmetric value minor), ``y2``/``sigma2_diag`` the aggregate
    rows.
    """

    node_id: str
    y1: np.ndarray
    y2: np.ndarray
    sigma1_diag: np.ndarray
    sigma2_diag: np.ndarray

    def __post_init__(self):
        for name in ("y1", "y2", "sigma1_diag", "sigma2_diag"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.y1.size != self.sigma1_diag.size or self.y2.size != self.sigma2_diag.size:
            raise SchemaError("measurement and variance lengths differ")
        if np.any(self.sigma1_diag <= 0) or np.any(self.sigma2_diag <= 0):
            raise SchemaError("variances must be strictly positive")


def measure_tree(tree, rng):
    """Measure every node: y = W truth + independent discrete Gaussian noise.

    ``rng`` is an ``RngState`` or a bare integer seed.  Each materialized
    row draws from its own stream keyed by (node id, query name, row
    index), so measurements replay bit-identically per (seed, node, row).
    """
    if isinstance(rng, int):
        rng = RngState(seed=rng)
    out = []
    d = tree.bucket_space.sym_card
    ba = tree.bucket_space.asym_card
    for node_id in tree.sorted_ids():
        node = tree.nodes[node_id]
        if node.truth is None:
            raise UsageError(f"node {node_id} has no truth to measure")
        x = node.truth.reshape(ba, d)
        y1, s1, y2, s2 = [], [], [], []
        for q in tree.query_types:
            var = q.variance_at(node.level)
            clean = q.selector.astype(np.int64) @ x  # (rows, d)
            if q.kind == INDIVIDUAL:
                for i in range(clean.shape[0]):
                    for j in range(d):
                        row = i * d + j
                        row_rng = rng.derive(node_id, q.name, row).to_random()
                        y1.append(
                            sample_discrete_gaussian(int(clean[i, j]), var, row_rng)
                        )
                        s1.append(var)
            else:
                agg = clean.sum(axis=1)
                for i in range(agg.shape[0]):
                    row_rng = rng.derive(node_id, q.name, i).to_random()
                    y2.append(sample_discrete_gaussian(int(agg[i]), var, row_rng))
                    s2.append(var)
        out.append(
            NoisyMeasurement(
                node_id=node_id,
                y1=np.asarray(y1, dtype=float),
                y2=np.asarray(y2, dtype=float),
                sigma1_diag=np.asarray(s1, dtype=float),
                sigma2_diag=np.asarray(s2, dtype=float),
            )
        )
    return out


def measurements_by_node(measurements):
    return {m.node_id: m for m in measurements}


def write_measurements(tree, measurements, path):
    """Write the noisy measurement file: one record per (node, query, row)."""
    d = tree.bucket_space.sym_card
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in sorted(measurements, key=lambda m: m.node_id):
            node = tree.nodes[m.node_id]
            i1 = i2 = 0
            for q in tree.query_types:
                var = q.variance_at(node.level)
                n = q.selector.shape[0]
                rows = n * d if q.kind == INDIVIDUAL else n
                for row in range(rows):
                    if q.kind == INDIVIDUAL:
                        value = m.y1[i1]
                        i1 += 1
                    else:
                        value = m.y2[i2]
                        i2 += 1
                    rec = {
                        "id": m.node_id,
                        "query": q.name,
                        "row": row,
                        "value": float(value),
                        "var": var,
                    }
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_measurements(path, tree):
    """Read a noisy measurement file back into per-node measurements."""
    d = tree.bucket_space.sym_card
    per_node = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            per_node.setdefault(rec["id"], {}).setdefault(rec["query"], {})[
                int(rec["row"])
            ] = (float(rec["value"]), float(rec["var"]))
    out = []
    for node_id in tree.sorted_ids():
        if node_id not in per_node:
            raise SchemaError(f"measurement file is missing node {node_id}")
        by_query = per_node[node_id]
        y1, s1, y2, s2 = [], [], [], []
        for q in tree.query_types:
            rows = q.materialized_rows(d)
            got = by_query.get(q.name, {})
            if sorted(got) != list(range(rows)):
                raise SchemaError(
                    f"node {node_id} query {q.name!r}: expected rows 0..{rows - 1}"
                )
            for row in range(rows):
                value, var = got[row]
                if q.kind == INDIVIDUAL:
                    y1.append(value)
                    s1.append(var)
                else:
                    y2.append(value)
                    s2.append(var)
        out.append(
            NoisyMeasurement(
                node_id=node_id,
                y1=np.asarray(y1, dtype=float),
                y2=np.asarray(y2, dtype=float),
                sigma1_diag=np.asarray(s1, dtype=float),
                sigma2_diag=np.asarray(s2, dtype=float),
            )
        )
    return out
