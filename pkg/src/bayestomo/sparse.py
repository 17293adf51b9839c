"""Symmetric sparse matrices, fill-reducing ordering and sparse Cholesky.

A :class:`SparseSymMatrix` keeps only its lower triangle in compressed
column form. Factorization is split into a symbolic pass
(:class:`SymbolicCholesky`: permutation, elimination tree, column counts)
and a cheap numeric pass, so a fixed pattern can be refactorized many times
with new values, as the Gibbs sampler does on every sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .ordering import approximate_minimum_degree

PIVOT_RTOL = 1e-12


class NotPositiveDefinite(ValueError):
    """Raised when a Cholesky pivot is not safely positive."""

    def __init__(self, column: int, message: str | None = None):
        self.column = column
        super().__init__(message or f"matrix is not positive definite (pivot at column {column})")


@dataclass(frozen=True)
class SparseSymMatrix:
    """Symmetric matrix stored as its lower triangle (CSC, sorted rows)."""

    dim: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def nnz_lower(self) -> int:
        return int(self.indptr[-1])

    def diagonal(self) -> np.ndarray:
        first = self.indptr[:-1]
        nonempty = first < self.indptr[1:]
        pos = np.minimum(first, max(self.nnz_lower - 1, 0))
        has = nonempty & (self.indices[pos] == np.arange(self.dim)) if self.nnz_lower else nonempty
        return np.where(has, self.data[pos] if self.nnz_lower else 0.0, 0.0)

    def with_data(self, data: np.ndarray) -> "SparseSymMatrix":
        """Same pattern, new values (aligned with ``self.data``)."""
        data = np.asarray(data, dtype=float)
        if data.shape != self.data.shape:
            raise ValueError("data does not match the stored pattern")
        return SparseSymMatrix(self.dim, self.indptr, self.indices, data)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.ascontiguousarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {v.shape}")
        return _kernels.sym_matvec(self.dim, self.indptr, self.indices, self.data, v)

    def quad_form(self, v: np.ndarray) -> float:
        return float(v @ self.matvec(v))

    def lower_csc(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=(self.dim, self.dim))

    def to_scipy(self) -> sp.csc_matrix:
        low = self.lower_csc()
        strict = sp.tril(low, k=-1)
        return (low + strict.T).tocsc()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.dim)]
        for j in range(self.dim):
            for i in self.indices[self.indptr[j]:self.indptr[j + 1]]:
                if i != j:
                    adj[i].add(int(j))
                    adj[j].add(int(i))
        return adj

    def dump_coo(self) -> str:
        """Coordinate-list text, one ``row col value`` line per stored entry."""
        lines = []
        for j in range(self.dim):
            for p in range(self.indptr[j], self.indptr[j + 1]):
                lines.append(f"{self.indices[p]} {j} {self.data[p]:.17g}")
        return "\n".join(lines) + ("\n" if lines else "")


def assemble(dim: int, triplets: Iterable[tuple[int, int, float]]) -> SparseSymMatrix:
    """Build a :class:`SparseSymMatrix` from ``(row, col, value)`` triplets.

    Upper-triangle entries are mirrored to the lower triangle and duplicates
    are summed.
    """
    trip = list(triplets)
    if trip:
        rows, cols, vals = (np.asarray(t) for t in zip(*trip))
    else:
        rows = cols = np.empty(0, dtype=np.int64)
        vals = np.empty(0)
    return from_coo(dim, rows, cols, vals)


def from_coo(dim: int, rows, cols, vals) -> SparseSymMatrix:
    if dim < 1:
        raise ValueError("dim must be positive")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= dim or cols.max() >= dim):
        raise IndexError(f"triplet index out of range for dim {dim}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite value in triplets")
    lo = np.maximum(rows, cols)
    hi = np.minimum(rows, cols)
    mat = sp.coo_matrix((vals, (lo, hi)), shape=(dim, dim)).tocsc()
    mat.sum_duplicates()
    mat.sort_indices()
    return SparseSymMatrix(
        dim,
        mat.indptr.astype(np.int64),
        mat.indices.astype(np.int64),
        mat.data.astype(float),
    )


def from_scipy(mat) -> SparseSymMatrix:
    """Take the lower triangle of a symmetric scipy matrix (explicit zeros kept)."""
    low = sp.tril(sp.coo_matrix(mat))
    dim = mat.shape[0]
    if mat.shape != (dim, dim):
        raise ValueError("matrix must be square")
    csc = sp.csc_matrix((low.data, (low.row, low.col)), shape=(dim, dim))
    csc.sum_duplicates()
    csc.sort_indices()
    return SparseSymMatrix(dim, csc.indptr.astype(np.int64), csc.indices.astype(np.int64), csc.data.astype(float))


@dataclass(frozen=True)
class Permutation:
    """``forward[k]`` is the original index placed at position ``k``."""

    forward: np.ndarray
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def from_forward(cls, forward) -> "Permutation":
        forward = np.asarray(forward, dtype=np.int64)
        n = forward.size
        if sorted(forward.tolist()) != list(range(n)):
            raise ValueError("not a permutation")
        inverse = np.empty(n, dtype=np.int64)
        inverse[forward] = np.arange(n)
        return cls(forward, inverse)

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls.from_forward(np.arange(n))

    def __len__(self) -> int:
        return self.forward.size

    def apply(self, v: np.ndarray) -> np.ndarray:
        """P v."""
        return v[self.forward]

    def unapply(self, v: np.ndarray) -> np.ndarray:
        """P' v."""
        return v[self.inverse]


def amd_order(A: SparseSymMatrix) -> Permutation:
    """Fill-reducing approximate minimum degree ordering of ``A``'s pattern."""
    return Permutation.from_forward(approximate_minimum_degree(A.dim, A.adjacency()))


class SymbolicCholesky:
    """Pattern-only analysis of P A P' reused across numeric factorizations.

    Works for any matrix sharing ``A``'s stored pattern: values are mapped
    into the permuted upper-triangle layout through a fixed index map.
    """

    def __init__(self, A: SparseSymMatrix, perm: Permutation | None = None):
        n = A.dim
        perm = Permutation.identity(n) if perm is None else perm
        if len(perm) != n:
            raise ValueError("permutation size does not match matrix")
        self.dim = n
        self.perm = perm
        self._pattern_indptr = A.indptr
        self._pattern_indices = A.indices

        col_of = np.repeat(np.arange(n), np.diff(A.indptr))
        pi = perm.inverse[A.indices]
        pj = perm.inverse[col_of]
        urow = np.minimum(pi, pj)
        ucol = np.maximum(pi, pj)
        order = np.lexsort((urow, ucol))
        self._value_map = order
        self.Ui = urow[order].astype(np.int64)
        self.Up = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(ucol, minlength=n), out=self.Up[1:])

        self.parent = _kernels.etree(n, self.Up, self.Ui)
        counts = _kernels.column_counts(n, self.Up, self.Ui, self.parent)
        self.Lp = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=self.Lp[1:])
        self.Rp, self.Rj = _kernels.row_patterns(n, self.Up, self.Ui, self.parent, self.Lp)

    @property
    def nnz(self) -> int:
        """Number of nonzeros in L, diagonal included."""
        return int(self.Lp[-1])

    def matches(self, A: SparseSymMatrix) -> bool:
        return A.dim == self.dim and (
            A.indptr is self._pattern_indptr
            or (np.array_equal(A.indptr, self._pattern_indptr) and np.array_equal(A.indices, self._pattern_indices))
        )

    def factor(self, A: SparseSymMatrix) -> "CholeskyFactor":
        if not self.matches(A):
            raise ValueError("matrix pattern differs from the analysed pattern")
        Ux = A.data[self._value_map]
        diag = A.diagonal()
        if np.any(diag <= 0):
            j = int(np.argmax(diag <= 0))
            raise NotPositiveDefinite(int(self.perm.inverse[j]), f"non-positive diagonal entry at row {j}")
        tol = PIVOT_RTOL * float(diag.max())
        Li = np.empty(self.nnz, dtype=np.int64)
        Lx = np.empty(self.nnz)
        bad = _kernels.numeric_cholesky(self.dim, self.Up, self.Ui, Ux, self.Rp, self.Rj, self.Lp, Li, Lx, tol)
        if bad >= 0:
            raise NotPositiveDefinite(int(bad))
        return CholeskyFactor(self.Lp, Li, Lx, self.perm)


@dataclass(frozen=True)
class CholeskyFactor:
    """P A P' = L L' with L lower triangular (CSC, diagonal first per column)."""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    perm: Permutation

    @property
    def dim(self) -> int:
        return self.indptr.size - 1

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def L(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=(self.dim, self.dim))

    def diag(self) -> np.ndarray:
        return self.data[self.indptr[:-1]]

    def forward_solve(self, b: np.ndarray) -> np.ndarray:
        """Solve L x = b in permuted coordinates."""
        x = np.array(b, dtype=float)
        _kernels.lsolve(self.indptr, self.indices, self.data, x)
        return x

    def backward_solve(self, b: np.ndarray) -> np.ndarray:
        """Solve L' x = b in permuted coordinates."""
        x = np.array(b, dtype=float)
        _kernels.ltsolve(self.indptr, self.indices, self.data, x)
        return x


def cholesky(A: SparseSymMatrix, perm: Permutation | None = None) -> CholeskyFactor:
    """Factor P A P' = L L'. Raises :class:`NotPositiveDefinite`."""
    return SymbolicCholesky(A, perm).factor(A)


def solve(F: CholeskyFactor, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.shape != (F.dim,):
        raise ValueError(f"right-hand side has shape {b.shape}, expected ({F.dim},)")
    x = F.forward_solve(F.perm.apply(b))
    x = F.backward_solve(x)
    return F.perm.unapply(x)


def log_det(F: CholeskyFactor) -> float:
    return 2.0 * float(np.sum(np.log(F.diag())))


def sample_from_factor(F: CholeskyFactor, xi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw of N(A^-1 xi, A^-1) given the factor of A."""
    z = rng.standard_normal(F.dim)
    w = F.forward_solve(F.perm.apply(np.asarray(xi, dtype=float)))
    v = F.backward_solve(w + z)
    return F.perm.unapply(v)


def sample_gaussian_by_precision(
    omega: SparseSymMatrix,
    xi,
    rng: np.random.Generator,
    perm: Permutation | None = None,
) -> np.ndarray:
    """Draw from N(omega^-1 xi, omega^-1) via a permuted sparse Cholesky factor.

    With P omega P' = L L', the draw is ``P' L'^-1 (L^-1 P xi + z)`` for a
    standard normal ``z``. An AMD ordering is computed when ``perm`` is None.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (omega.dim,):
        raise ValueError("xi length does not match precision dimension")
    if perm is None:
        perm = amd_order(omega)
    return sample_from_factor(cholesky(omega, perm), xi, rng)


def fill_nnz(A: SparseSymMatrix, perm: Permutation | None = None) -> int:
    """nnz(L) for ``A`` under ``perm``, from symbolic analysis only."""
    return SymbolicCholesky(A, perm).nnz


def selected_inverse_diagonal(F: CholeskyFactor) -> np.ndarray:
    """diag(A^-1) with one forward solve per column: (A^-1)_ii = |L^-1 P e_i|^2."""
    n = F.dim
    out = np.empty(n)
    e = np.zeros(n)
    for k in range(n):
        e[k] = 1.0
        out[F.perm.forward[k]] = float(np.sum(F.forward_solve(e) ** 2))
        e[k] = 0.0
    return out
