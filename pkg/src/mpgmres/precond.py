"""ILU(0) preconditioner: incomplete LU restricted to the pattern of A."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .sparse_core import CsrMatrix, Precision, convert_precision

__all__ = ["Ilu0Factors", "IdentityPreconditioner", "FactorizationError",
           "ilu0_factorize", "ilu0_apply"]


class FactorizationError(ArithmeticError):
    def __init__(self, message: str, row: int):
        self.row = row
        super().__init__(message)


@njit(cache=True)
def _ilu0_inplace(n, row_ptr, col_idx, vals, diag_ptr):
    """IKJ ILU(0).  Returns -1 on success, else the failing row."""
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        start, end = row_ptr[i], row_ptr[i + 1]
        for p in range(start, end):
            pos[col_idx[p]] = p
        for p in range(start, end):
            k = col_idx[p]
            if k >= i:
                break
            pivot = vals[diag_ptr[k]]
            lik = vals[p] / pivot
            vals[p] = lik
            for q in range(diag_ptr[k] + 1, row_ptr[k + 1]):
                t = pos[col_idx[q]]
                if t >= 0:
                    vals[t] -= lik * vals[q]
        for p in range(start, end):
            pos[col_idx[p]] = -1
        d = vals[diag_ptr[i]]
        if d == 0 or not np.isfinite(d):
            return i
    return -1


@njit(cache=True)
def _ilu0_solve(row_ptr, col_idx, vals, diag_ptr, z, out):
    n = z.size
    # unit lower forward substitution
    for i in range(n):
        acc = z[i]
        for p in range(row_ptr[i], diag_ptr[i]):
            acc -= vals[p] * out[col_idx[p]]
        out[i] = acc
    for i in range(n - 1, -1, -1):
        acc = out[i]
        for p in range(diag_ptr[i] + 1, row_ptr[i + 1]):
            acc -= vals[p] * out[col_idx[p]]
        out[i] = acc / vals[diag_ptr[i]]


@dataclass(frozen=True, eq=False)
class Ilu0Factors:
    """Combined L\\U storage on the pattern of A.

    Strictly-lower entries hold L (unit diagonal implied); the diagonal and
    upper entries hold U.
    """

    lu: CsrMatrix
    diag_ptr: np.ndarray

    @property
    def dtype(self) -> np.dtype:
        return self.lu.dtype

    @property
    def n(self) -> int:
        return self.lu.n_rows

    @property
    def nnz(self) -> int:
        return self.lu.nnz

    @property
    def nbytes(self) -> int:
        return self.lu.values.nbytes + self.diag_ptr.nbytes

    def lower(self) -> np.ndarray:
        a = self.lu.toarray()
        return np.tril(a, -1) + np.eye(self.n, dtype=a.dtype)

    def upper(self) -> np.ndarray:
        return np.triu(self.lu.toarray())

    def apply(self, z: np.ndarray) -> np.ndarray:
        return ilu0_apply(self, z)


def _diag_positions(A: CsrMatrix) -> np.ndarray:
    diag_ptr = np.empty(A.n_rows, dtype=A.row_ptr.dtype)
    for i in range(A.n_rows):
        lo, hi = A.row_ptr[i], A.row_ptr[i + 1]
        k = lo + np.searchsorted(A.col_idx[lo:hi], i)
        if k >= hi or A.col_idx[k] != i:
            raise FactorizationError(f"row {i} has no diagonal entry in its pattern", i)
        diag_ptr[i] = k
    return diag_ptr


def ilu0_factorize(A: CsrMatrix, precision=None) -> Ilu0Factors:
    """Factor ``A`` as L U on its own sparsity pattern (no fill-in).

    The factorization runs in ``precision`` (default: that of ``A``); the
    factors are stored and later applied in the same precision.
    """
    if A.n_rows != A.n_cols:
        raise ValueError("ILU(0) needs a square matrix")
    if precision is not None:
        A = convert_precision(A, Precision.of(precision))
    diag_ptr = _diag_positions(A)
    vals = A.values.copy()
    bad = _ilu0_inplace(A.n_rows, A.row_ptr, A.col_idx, vals, diag_ptr)
    if bad >= 0:
        raise FactorizationError(f"zero or non-finite pivot at row {bad}", int(bad))
    return Ilu0Factors(A.with_values(vals), diag_ptr)


def ilu0_apply(F: Ilu0Factors, z: np.ndarray) -> np.ndarray:
    """Solve ``L U r = z`` in the precision of the factors."""
    z = np.asarray(z)
    if z.shape != (F.n,):
        raise ValueError(f"dimension mismatch: factors are {F.n}, vector is {z.shape}")
    z = np.ascontiguousarray(z, dtype=F.dtype)
    out = np.empty_like(z)
    lu = F.lu
    _ilu0_solve(lu.row_ptr, lu.col_idx, lu.values, F.diag_ptr, z, out)
    return out


class IdentityPreconditioner:
    """``M = I``; applying it only converts to its precision."""

    def __init__(self, n: int, precision=Precision.HIGH):
        self.n = n
        self._dtype = Precision.of(precision).dtype

    @property
    def dtype(self) -> np.dtype:
        return self._dtype

    nbytes = 0

    def apply(self, z: np.ndarray) -> np.ndarray:
        return np.array(z, dtype=self._dtype)
