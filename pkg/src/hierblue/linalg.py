"""Succinct Kronecker-structured matrix algebra and small dense kernels.

Every covariance handled by the tree solver shares the shape
``A (x) P0 + B (x) P1`` where, on the symmetric-feature dimension of size
``d``, ``P1 = J/d`` projects onto the all-ones vector and ``P0 = I - J/d``
onto its orthogonal complement.  Matrices of this shape are closed under
addition, multiplication, transposition and Moore-Penrose pseudoinversion,
so all covariance work happens on the two small component matrices; the
full form is only materialized for tests and oracles.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError, SingularMatrixError

# Eigen/singular values below RANK_CUTOFF times the largest one are treated
# as exact zeros when pseudoinverting.
RANK_CUTOFF = 1e-10


def as_matrix(x, name="matrix"):
    """Coerce to a finite 2-d float array."""
    m = np.asarray(x, dtype=float)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-dimensional, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise DimensionError(f"{name} contains non-finite entries")
    return m


def as_vector(x, name="vector"):
    """Coerce to a finite 1-d float array."""
    v = np.asarray(x, dtype=float).ravel()
    if v.size and not np.all(np.isfinite(v)):
        raise DimensionError(f"{name} contains non-finite entries")
    return v


def symmetrized(m):
    return 0.5 * (m + m.T)


@lru_cache(maxsize=64)
def _projectors(d):
    j = np.full((d, d), 1.0 / d)
    p0 = np.eye(d) - j
    p1 = j
    p0.setflags(write=False)
    p1.setflags(write=False)
    return p0, p1


def centering_projector(d):
    """P0 = I - J/d on the symmetric dimension."""
    return _projectors(d)[0]


def mean_projector(d):
    """P1 = J/d on the symmetric dimension."""
    return _projectors(d)[1]


def kron_apply(a, b, z):
    """Apply ``(a (x) b)`` to ``z`` without materializing the product.

    Uses the row-major vec identity ``(a (x) b) vec(Z) = vec(a Z b^T)``.

    Parameters
    ----------
    a, b : (m1, n1), (m2, n2) arrays
    z : vector of length n1 * n2

    Returns
    -------
    vector of length m1 * m2
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    z = as_vector(z, "z")
    if z.size != a.shape[1] * b.shape[1]:
        raise DimensionError(
            f"z has length {z.size}, expected {a.shape[1]} * {b.shape[1]}"
        )
    zmat = z.reshape(a.shape[1], b.shape[1])
    return (a @ zmat @ b.T).ravel()


@dataclass(frozen=True)
class SuccinctMatrix:
    """The compressed form ``a (x) P0 + b (x) P1`` of shape (m*d, k*d).

    ``a`` and ``b`` must share dimensions; ``d`` is the symmetric-feature
    cardinality.  Instances are immutable values.
    """

    a: np.ndarray
    b: np.ndarray
    d: int

    def __post_init__(self):
        a = as_matrix(self.a, "a")
        b = as_matrix(self.b, "b")
        if a.shape != b.shape:
            raise DimensionError(f"components differ in shape: {a.shape} vs {b.shape}")
        if int(self.d) < 1:
            raise DimensionError("d must be >= 1")
        a = a.copy()
        b = b.copy()
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", int(self.d))

    @property
    def shape(self):
        return (self.a.shape[0] * self.d, self.a.shape[1] * self.d)

    def to_dense(self):
        p0, p1 = _projectors(self.d)
        return np.kron(self.a, p0) + np.kron(self.b, p1)

    @classmethod
    def identity(cls, k, d):
        eye = np.eye(k)
        return cls(eye, eye, d)

    @classmethod
    def zeros(cls, k, d):
        z = np.zeros((k, k))
        return cls(z, z, d)

    @classmethod
    def from_dense(cls, m, d):
        """Recompress a materialized succinct matrix.

        For each (i, j) block ``M_ij = a_ij P0 + b_ij P1``:
        ``b_ij = 1^T M_ij 1 / d`` and ``a_ij = tr(M_ij P0) / (d - 1)``.
        With d = 1 the P0 component vanishes, so ``a`` is set equal to ``b``.
        """
        m = as_matrix(m, "m")
        rows, cols = m.shape
        if rows % d or cols % d:
            raise DimensionError(f"shape {m.shape} is not a multiple of d={d}")
        mr, kc = rows // d, cols // d
        blocks = m.reshape(mr, d, kc, d)
        b = blocks.sum(axis=(1, 3)) / d
        if d == 1:
            return cls(b, b, 1)
        p0 = centering_projector(d)
        a = np.einsum("isjt,ts->ij", blocks, p0) / (d - 1)
        return cls(a, b, d)

    def transpose(self):
        return SuccinctMatrix(self.a.T, self.b.T, self.d)

    @property
    def T(self):
        return self.transpose()

    def symmetrized(self):
        return SuccinctMatrix(symmetrized(self.a), symmetrized(self.b), self.d)

    def scale(self, c):
        return SuccinctMatrix(c * self.a, c * self.b, self.d)

    def __add__(self, other):
        self._check_same_layout(other)
        return SuccinctMatrix(self.a + other.a, self.b + other.b, self.d)

    def __sub__(self, other):
        self._check_same_layout(other)
        return SuccinctMatrix(self.a - other.a, self.b - other.b, self.d)

    def __matmul__(self, other):
        if isinstance(other, SuccinctMatrix):
            return succinct_mul(self, other)
        return self.matvec(other)

    def matvec(self, z):
        z = as_vector(z, "z")
        p0, p1 = _projectors(self.d)
        return kron_apply(self.a, p0, z) + kron_apply(self.b, p1, z)

    def pinv(self):
        return succinct_pinv(self)

    def min_eigenvalue(self):
        """Smallest eigenvalue of the symmetric materialization.

        In the orthogonal split R^d = span(1) + 1-perp the matrix acts as
        ``b`` on the first part and ``a`` on the second, so for d >= 2 the
        spectrum is eig(a) (with multiplicity d-1) union eig(b).
        """
        vals = np.linalg.eigvalsh(symmetrized(self.b))
        if self.d > 1:
            vals = np.concatenate([vals, np.linalg.eigvalsh(symmetrized(self.a))])
        return float(vals.min()) if vals.size else 0.0

    def _check_same_layout(self, other):
        if not isinstance(other, SuccinctMatrix):
            raise DimensionError("expected a SuccinctMatrix operand")
        if self.d != other.d or self.a.shape != other.a.shape:
            raise DimensionError(
                f"layout mismatch: {self.a.shape}/d={self.d} vs "
                f"{other.a.shape}/d={other.d}"
            )


def succinct_to_dense(m):
    """Materialize ``a (x) P0 + b (x) P1``."""
    return m.to_dense()


def succinct_mul(m1, m2):
    """Product of two succinct matrices, computed componentwise."""
    if m1.d != m2.d:
        raise DimensionError(f"d mismatch: {m1.d} vs {m2.d}")
    if m1.a.shape[1] != m2.a.shape[0]:
        raise DimensionError(
            f"inner dimensions differ: {m1.a.shape} times {m2.a.shape}"
        )
    return SuccinctMatrix(m1.a @ m2.a, m1.b @ m2.b, m1.d)


def succinct_pinv(m):
    """Moore-Penrose pseudoinverse, computed componentwise."""
    return SuccinctMatrix(dense_pinv(m.a), dense_pinv(m.b), m.d)


def dense_pinv(m, cutoff=RANK_CUTOFF):
    """Moore-Penrose pseudoinverse with a relative rank cutoff.

    Symmetric inputs go through an eigendecomposition, everything else
    through an SVD.  Eigen/singular values below ``cutoff`` times the
    largest magnitude are treated as zero.
    """
    m = as_matrix(m, "m")
    if m.size == 0:
        return m.T.copy()
    if m.shape[0] == m.shape[1] and np.allclose(m, m.T, atol=1e-12, rtol=1e-10):
        w, v = np.linalg.eigh(symmetrized(m))
        big = np.abs(w).max()
        inv = np.where(np.abs(w) > cutoff * big, 1.0, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(inv > 0, 1.0 / np.where(w == 0, 1.0, w), 0.0)
        return symmetrized((v * inv) @ v.T)
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.shape[1], m.shape[0]))
    inv = np.where(s > cutoff * s[0], 1.0 / np.where(s == 0, 1.0, s), 0.0)
    return (vt.T * inv) @ u.T


def _invert(m, block):
    m = as_matrix(m, block)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"block {block} must be square, got {m.shape}")
    if m.size == 0:
        return m.copy()
    if np.linalg.cond(m) > 1.0 / (RANK_CUTOFF * 10):
        raise SingularMatrixError(f"block {block} is numerically singular", block=block)
    return np.linalg.inv(m)


@dataclass(frozen=True)
class BlockInverse:
    """Inverse blocks of ``[[F (x) P0 + G00 (x) P1, G01 (x) 1], [G10 (x) 1^T, d*G11]]``.

    The inverse has the same structure with ``F^{-1}`` in place of F and
    ``H = G^{-1}`` blocks scaled by 1/d in place of the G blocks.
    """

    f_inv: np.ndarray
    h00: np.ndarray
    h01: np.ndarray
    h10: np.ndarray
    h11: np.ndarray
    d: int

    def to_dense(self):
        d = self.d
        p0, p1 = _projectors(d)
        col = np.ones((d, 1))
        top = np.hstack(
            [np.kron(self.f_inv, p0) + np.kron(self.h00, p1), np.kron(self.h01, col) / d]
        )
        bottom = np.hstack([np.kron(self.h10, col.T) / d, self.h11 / d])
        return np.vstack([top, bottom])


def assemble_block_matrix(f, g00, g01, g10, g11, d):
    """Materialize the structured matrix the block-inverse lemma inverts."""
    p0, p1 = _projectors(d)
    col = np.ones((d, 1))
    top = np.hstack([np.kron(f, p0) + np.kron(g00, p1), np.kron(g01, col)])
    bottom = np.hstack([np.kron(g10, col.T), d * np.asarray(g11, dtype=float)])
    return np.vstack([top, bottom])


def block_inverse(f, g00, g01, g10, g11, d):
    """Closed-form inverse of the structured block matrix.

    Raises ``SingularMatrixError`` naming the offending block when F or the
    assembled G is singular.
    """
    f = as_matrix(f, "f")
    g00 = as_matrix(g00, "g00")
    g01 = as_matrix(g01, "g01")
    g10 = as_matrix(g10, "g10")
    g11 = as_matrix(g11, "g11")
    m = f.shape[0]
    if g00.shape != (m, m):
        raise DimensionError(f"g00 must match f, got {g00.shape} vs {f.shape}")
    n = g11.shape[0]
    if g01.shape != (m, n) or g10.shape != (n, m) or g11.shape != (n, n):
        raise DimensionError("G blocks have inconsistent shapes")
    f_inv = _invert(f, "f")
    g = np.block([[g00, g01], [g10, g11]])
    h = _invert(g, "g")
    return BlockInverse(
        f_inv=f_inv,
        h00=h[:m, :m],
        h01=h[:m, m:],
        h10=h[m:, :m],
        h11=h[m:, m:],
        d=int(d),
    )


@dataclass(frozen=True)
class ProjectionPair:
    """Factors of the constraint projection ``L = Sigma R^T (R Sigma R^T)^{-1}``.

    Under the structured constraint form ``R = [R1 (x) I; R2 (x) 1^T]`` and a
    succinct ``Sigma = A (x) P0 + B (x) P1``:

    ``L  = [la (x) P0 + lb1 (x) P1,  (1/d) lb2 (x) 1]`` and
    ``LR = tilde_a (x) P0 + tilde_b (x) P1``.
    """

    la: np.ndarray
    lb1: np.ndarray
    lb2: np.ndarray
    tilde_a: np.ndarray
    tilde_b: np.ndarray
    d: int

    def lr_succinct(self):
        return SuccinctMatrix(self.tilde_a, self.tilde_b, self.d)

    def apply(self, v1, v2):
        """Compute ``L [v1; v2]`` where v1 has length e1*d and v2 length e2."""
        d = self.d
        p0, p1 = _projectors(d)
        k = self.la.shape[0]
        out = np.zeros(k * d)
        if self.la.shape[1]:
            v1 = as_vector(v1, "v1")
            out += kron_apply(self.la, p0, v1) + kron_apply(self.lb1, p1, v1)
        if self.lb2.shape[1]:
            v2 = as_vector(v2, "v2")
            out += kron_apply(self.lb2, np.ones((d, 1)), v2) / d
        return out

    def to_dense(self):
        d = self.d
        p0, p1 = _projectors(d)
        left = np.kron(self.la, p0) + np.kron(self.lb1, p1)
        right = np.kron(self.lb2, np.ones((d, 1))) / d
        return np.hstack([left, right])


def _as_factor(r, k, name):
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        return np.zeros((0, k))
    r = as_matrix(r, name)
    if r.shape[1] != k:
        raise DimensionError(f"{name} must have {k} columns, got shape {r.shape}")
    return r


def projection_pair(sigma_gls, r1, r2):
    """Build the succinct constraint projection for ECGLS.

    ``r1`` (e1 x k) carries the symmetric-sliced constraint rows, ``r2``
    (e2 x k) the symmetric-aggregated ones.  Requires r1, and the stack of
    r1 and r2, to have full row rank relative to ``sigma_gls``.
    """
    a, b, d = sigma_gls.a, sigma_gls.b, sigma_gls.d
    k = a.shape[0]
    r1 = _as_factor(r1, k, "r1")
    r2 = _as_factor(r2, k, "r2")
    rt = np.vstack([r1, r2])
    e1 = r1.shape[0]

    try:
        la = a @ r1.T @ _invert(r1 @ a @ r1.T, "r1 A r1^T")
    except SingularMatrixError:
        raise SingularMatrixError(
            "r1 A r1^T is singular; r1 lacks full row rank on the P0 block",
            block="r1 A r1^T",
        )
    try:
        lb = b @ rt.T @ _invert(rt @ b @ rt.T, "R~ B R~^T")
    except SingularMatrixError:
        raise SingularMatrixError(
            "R~ B R~^T is singular; stacked constraints lack full row rank",
            block="R~ B R~^T",
        )
    lb1, lb2 = lb[:, :e1], lb[:, e1:]
    tilde_a = la @ r1
    tilde_b = lb @ rt
    pair = ProjectionPair(la=la, lb1=lb1, lb2=lb2, tilde_a=tilde_a, tilde_b=tilde_b, d=d)
    # construction-time invariant: the tilde factors are exactly L applied to R
    assert np.allclose(pair.tilde_a, pair.la @ r1, atol=1e-12)
    assert np.allclose(pair.tilde_b, np.hstack([pair.lb1, pair.lb2]) @ rt, atol=1e-12)
    return pair
