"""Sparse triplet assembly and direct linear solves.

Assembly is order-independent: triplets are sorted by (row, col, value)
before duplicate summation, so any insertion order produces bitwise
identical matrices.  Solving goes through SuperLU; a failed factorization
or an unusably large residual reports the matrix as singular.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "LinsysError", "IndexOutOfRange", "SingularMatrix", "DimensionMismatch",
    "AssemblyBuffer", "AssemblyPattern", "SparseMatrix", "finalize", "solve",
]


class LinsysError(Exception):
    pass


class IndexOutOfRange(LinsysError):
    pass


class SingularMatrix(LinsysError):
    pass


class DimensionMismatch(LinsysError):
    pass


class AssemblyBuffer:
    """Accumulates (row, col, value) triplets for a square matrix."""

    def __init__(self, dimension):
        self.dimension = int(dimension)
        self._rows = []
        self._cols = []
        self._vals = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if not (rows.size == cols.size == vals.size):
            raise DimensionMismatch("triplet arrays differ in length")
        if rows.size == 0:
            return
        if rows.min() < 0 or rows.max() >= self.dimension \
                or cols.min() < 0 or cols.max() >= self.dimension:
            raise IndexOutOfRange("triplet index outside 0..%d" % (self.dimension - 1))
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(vals)

    def add_entry(self, i, j, v):
        self.add([i], [j], [v])


class SparseMatrix:
    """CSR matrix with fixed square dimension."""

    def __init__(self, csr):
        if csr.shape[0] != csr.shape[1]:
            raise DimensionMismatch("matrix must be square")
        self._csr = csr

    @property
    def dimension(self):
        return self._csr.shape[0]

    @property
    def row_offsets(self):
        return self._csr.indptr

    @property
    def col_indices(self):
        return self._csr.indices

    @property
    def values(self):
        return self._csr.data

    def matvec(self, x):
        return self._csr @ np.asarray(x, dtype=float)

    def to_scipy(self):
        return self._csr

    def toarray(self):
        return self._csr.toarray()


class AssemblyPattern:
    """Frozen triplet-to-CSR mapping for repeated same-structure assembly.

    The first finalize with an empty pattern runs the full sorted path and
    records, per triplet slot, the CSR data slot it lands in.  Later
    finalizes with the same insertion structure reduce to one weighted
    bincount (duplicates then sum in insertion order, still deterministic,
    though the grouping may differ from the sorted path in the last ulp).
    """

    def __init__(self):
        self.csr_slot = None
        self.indptr = None
        self.indices = None
        self.dimension = None

    @property
    def ready(self):
        return self.csr_slot is not None


def finalize(buffer, pattern=None):
    """Sum duplicate triplets into a CSR matrix, deterministically."""
    dim = buffer.dimension
    if not buffer._rows:
        return SparseMatrix(sp.csr_matrix((dim, dim)))
    vals = np.concatenate(buffer._vals)
    if pattern is not None and pattern.ready:
        if pattern.dimension != dim or len(vals) != len(pattern.csr_slot):
            raise DimensionMismatch(
                "assembly does not match the frozen pattern")
        data = np.bincount(pattern.csr_slot, weights=vals,
                           minlength=len(pattern.indices))
        csr = sp.csr_matrix((data, pattern.indices, pattern.indptr),
                            shape=(dim, dim))
        return SparseMatrix(csr)
    rows = np.concatenate(buffer._rows)
    cols = np.concatenate(buffer._cols)
    key = rows * dim + cols
    order = np.lexsort((vals, key))
    skey = key[order]
    svals = vals[order]
    first = np.ones(len(skey), dtype=bool)
    first[1:] = skey[1:] != skey[:-1]
    starts = np.flatnonzero(first)
    data = np.add.reduceat(svals, starts)
    ukey = skey[starts]
    urows = (ukey // dim).astype(np.int32)
    ucols = (ukey % dim).astype(np.int32)
    indptr = np.zeros(dim + 1, dtype=np.int32)
    np.add.at(indptr, urows + 1, 1)
    np.cumsum(indptr, out=indptr)
    csr = sp.csr_matrix((data, ucols, indptr), shape=(dim, dim))
    if pattern is not None:
        group = np.cumsum(first) - 1          # CSR slot per sorted triplet
        slot = np.empty(len(key), dtype=np.int64)
        slot[order] = group
        pattern.csr_slot = slot
        pattern.indptr = indptr
        pattern.indices = ucols
        pattern.dimension = dim
    return SparseMatrix(csr)


def solve(matrix, rhs):
    """Direct LU solve with one step of iterative refinement.

    Raises SingularMatrix when factorization fails or the refined residual
    stays above max(1e-10, 1e-12 * ||b||).
    """
    b = np.asarray(rhs, dtype=float).ravel()
    if b.size != matrix.dimension:
        raise DimensionMismatch("rhs has length %d, matrix dimension %d"
                                % (b.size, matrix.dimension))
    A = matrix.to_scipy()
    try:
        lu = spla.splu(A.tocsc())
        x = lu.solve(b)
    except (RuntimeError, ValueError) as exc:
        raise SingularMatrix(str(exc)) from exc
    if not np.isfinite(x).all():
        raise SingularMatrix("factorization produced non-finite values")
    r = b - A @ x
    tol = max(1e-10, 1e-12 * np.linalg.norm(b))
    if np.linalg.norm(r) > tol:
        x = x + lu.solve(r)
        r = b - A @ x
        if np.linalg.norm(r) > tol:
            raise SingularMatrix("residual %.3e after refinement (tol %.3e)"
                                 % (np.linalg.norm(r), tol))
    return x
