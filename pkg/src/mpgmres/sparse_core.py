"""Precision-generic sparse kernels, matrix ingestion/generation and norms.

Two working precisions are supported: ``HIGH`` (IEEE binary64) and ``LOW``
(IEEE binary32).  All kernels compute in the precision of their operands;
callers convert explicitly with :func:`convert_precision`.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

# skip the TBB probe (and its version warning) unless explicitly requested
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

__all__ = [
    "Precision", "HIGH", "LOW", "PrecisionOverflowError", "MatrixMarketError",
    "CsrMatrix", "spmv", "dot", "axpy", "norm2", "scale", "convert_precision",
    "read_matrix_market", "write_matrix_market", "gen_convdiff2d",
    "backward_error", "estimate_bytes", "frobenius_norm", "inf_norm",
]


class Precision(enum.Enum):
    HIGH = "double"
    LOW = "single"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64) if self is Precision.HIGH else np.dtype(np.float32)

    @classmethod
    def of(cls, value) -> "Precision":
        """Coerce a Precision, dtype, or name ('double', 'single', 'high', 'low')."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            key = value.lower()
            if key in ("high", "double", "float64", "f8"):
                return cls.HIGH
            if key in ("low", "single", "float32", "f4"):
                return cls.LOW
            raise ValueError(f"unknown precision {value!r}")
        dt = np.dtype(value)
        if dt == np.float64:
            return cls.HIGH
        if dt == np.float32:
            return cls.LOW
        raise ValueError(f"unsupported scalar type {dt}")


HIGH = Precision.HIGH
LOW = Precision.LOW


class PrecisionOverflowError(OverflowError):
    """Raised when a downcast would turn finite values into infinities."""


class MatrixMarketError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix.

    The index arrays are treated as immutable, so precision conversions share
    them with the source matrix; only ``values`` is copied.
    """

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        # 4-byte indices unless the matrix is too large for them
        itype = np.int32 if np.asarray(self.col_idx).size < 2**31 else np.int64
        row_ptr = np.ascontiguousarray(self.row_ptr, dtype=itype)
        col_idx = np.ascontiguousarray(self.col_idx, dtype=itype)
        values = np.ascontiguousarray(self.values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "values", values)
        self._check()

    def _check(self):
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.n_rows + 1,):
            raise ValueError("row_ptr must have length n_rows + 1")
        if rp[0] != 0 or rp[-1] != ci.size or ci.size != self.values.size:
            raise ValueError("row_ptr endpoints inconsistent with nnz")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.n_cols:
                raise ValueError("column index out of range")
            # strictly increasing within each row: every in-row step is positive
            steps = np.diff(ci)
            row_starts = np.zeros(ci.size, dtype=bool)
            row_starts[rp[:-1][rp[:-1] < ci.size]] = True
            if np.any(steps[~row_starts[1:]] <= 0):
                raise ValueError("column indices must be strictly increasing within rows")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @property
    def precision(self) -> Precision:
        return Precision.of(self.dtype)

    @property
    def nbytes(self) -> int:
        return self.row_ptr.nbytes + self.col_idx.nbytes + self.values.nbytes

    def with_values(self, values: np.ndarray) -> "CsrMatrix":
        return CsrMatrix(self.n_rows, self.n_cols, self.row_ptr, self.col_idx, values)

    def diagonal(self) -> np.ndarray:
        d = np.zeros(min(self.shape), dtype=self.dtype)
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        on_diag = rows == self.col_idx
        d[rows[on_diag]] = self.values[on_diag]
        return d

    def toarray(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.dtype)
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        out[rows, self.col_idx] = self.values
        return out

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)

    def transpose(self) -> "CsrMatrix":
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        return CsrMatrix.from_coo(self.n_cols, self.n_rows, self.col_idx, rows, self.values)

    def __matmul__(self, x):
        return spmv(self, x)

    @classmethod
    def from_coo(cls, n_rows, n_cols, rows, cols, vals, dtype=None) -> "CsrMatrix":
        """Build canonical CSR from triplets; duplicate entries are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=dtype or np.float64)
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
            raise ValueError("triplet index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size:
            new = np.ones(rows.size, dtype=bool)
            new[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
            group = np.cumsum(new) - 1
            summed = np.zeros(int(group[-1]) + 1, dtype=vals.dtype)
            np.add.at(summed, group, vals)
            rows, cols, vals = rows[new], cols[new], summed
        row_ptr = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n_rows), out=row_ptr[1:])
        return cls(n_rows, n_cols, row_ptr, cols, vals)

    @classmethod
    def from_dense(cls, a, dtype=None) -> "CsrMatrix":
        a = np.asarray(a)
        rows, cols = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], rows, cols, a[rows, cols], dtype=dtype or a.dtype)

    @classmethod
    def identity(cls, n: int, dtype=np.float64) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n, dtype=dtype))


# ---------------------------------------------------------------- kernels

@njit(parallel=True, cache=True)
def _csr_matvec(row_ptr, col_idx, values, x, y):
    for i in prange(y.size):
        acc = y[i]
        for k in range(row_ptr[i], row_ptr[i + 1]):
            acc += values[k] * x[col_idx[k]]
        y[i] = acc


def spmv(A: CsrMatrix, x: np.ndarray) -> np.ndarray:
    """Return ``A @ x`` computed in the precision of ``A``'s values.

    ``x`` is converted to that precision first; a HIGH vector times a LOW
    matrix therefore runs entirely in LOW arithmetic.
    """
    x = np.asarray(x)
    if x.ndim != 1 or x.size != A.n_cols:
        raise ValueError(f"dimension mismatch: matrix has {A.n_cols} columns, vector has {x.size}")
    x = np.ascontiguousarray(x, dtype=A.dtype)
    y = np.zeros(A.n_rows, dtype=A.dtype)
    _csr_matvec(A.row_ptr, A.col_idx, A.values, x, y)
    return y


def _check_same_length(x, y):
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")


def dot(x, y):
    x, y = np.asarray(x), np.asarray(y)
    _check_same_length(x, y)
    return np.dot(x, y)


def axpy(a, x, y):
    """Return ``a*x + y`` in the precision of ``y``."""
    x, y = np.asarray(x), np.asarray(y)
    _check_same_length(x, y)
    dt = y.dtype
    return dt.type(a) * x.astype(dt, copy=False) + y


def norm2(x):
    x = np.asarray(x)
    return np.linalg.norm(x)


def scale(a, x):
    x = np.asarray(x)
    return x.dtype.type(a) * x


def convert_precision(x, target):
    """Round ``x`` (vector or CsrMatrix) to ``target`` precision.

    Downcasts round to nearest; upcasts are exact.  Sparsity structure is
    shared with the input.
    """
    dt = Precision.of(target).dtype
    if isinstance(x, CsrMatrix):
        if x.dtype == dt:
            return x
        return x.with_values(_cast_values(x.values, dt))
    return _cast_values(np.asarray(x), dt)


def _cast_values(v: np.ndarray, dt: np.dtype) -> np.ndarray:
    if v.dtype == dt:
        return v
    with np.errstate(over="ignore"):
        out = v.astype(dt)
    if dt.itemsize < v.dtype.itemsize:
        bad = np.isinf(out) & np.isfinite(v)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise PrecisionOverflowError(
                f"value {v[i]!r} at index {i} overflows {dt.name}")
    return out


# ------------------------------------------------------------ Matrix Market

def read_matrix_market(path) -> CsrMatrix:
    """Read a ``coordinate real`` Matrix Market file (general or symmetric)."""
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatrixMarketError("empty file", 1)
    header = lines[0].split()
    if len(header) != 5 or header[0].lower() != "%%matrixmarket":
        raise MatrixMarketError("missing %%MatrixMarket header", 1)
    obj, fmt, field, symm = (h.lower() for h in header[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixMarketError(f"unsupported object/format {obj} {fmt}", 1)
    if field not in ("real", "integer", "double"):
        raise MatrixMarketError(f"unsupported field {field!r}", 1)
    if symm not in ("general", "symmetric"):
        raise MatrixMarketError(f"unsupported symmetry {symm!r}", 1)

    lineno = 1
    size = None
    for lineno in range(2, len(lines) + 1):
        text = lines[lineno - 1].strip()
        if text and not text.startswith("%"):
            size = text.split()
            break
    if size is None:
        raise MatrixMarketError("missing size line", lineno)
    try:
        n_rows, n_cols, nnz = (int(t) for t in size)
    except ValueError:
        raise MatrixMarketError("malformed size line", lineno) from None

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz, dtype=np.float64)
    count = 0
    for k in range(lineno, len(lines)):
        text = lines[k].strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        if len(parts) != 3:
            raise MatrixMarketError("expected 'row col value'", k + 1)
        try:
            i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise MatrixMarketError("malformed entry", k + 1) from None
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            raise MatrixMarketError(f"index ({i}, {j}) out of range", k + 1)
        if count >= nnz:
            raise MatrixMarketError("more entries than declared", k + 1)
        rows[count], cols[count], vals[count] = i - 1, j - 1, v
        count += 1
    if count != nnz:
        raise MatrixMarketError(f"expected {nnz} entries, found {count}", len(lines))

    if symm == "symmetric":
        off = rows != cols
        rows, cols, vals = (np.concatenate([rows, cols[off]]),
                            np.concatenate([cols, rows[off]]),
                            np.concatenate([vals, vals[off]]))
    return CsrMatrix.from_coo(n_rows, n_cols, rows, cols, vals)


def write_matrix_market(A: CsrMatrix, path, comment: str | None = None) -> None:
    rows = np.repeat(np.arange(A.n_rows), np.diff(A.row_ptr))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        if comment:
            for line in comment.splitlines():
                fh.write(f"% {line}\n")
        fh.write(f"{A.n_rows} {A.n_cols} {A.nnz}\n")
        for i, j, v in zip(rows, A.col_idx, A.values.astype(np.float64)):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")


# ------------------------------------------------------------ generators

def gen_convdiff2d(k: int, beta: float) -> CsrMatrix:
    """Five-point upwind discretisation of ``-lap(u) + beta*(u_x + u_y)``.

    Unit square, ``k x k`` interior grid, homogeneous Dirichlet boundary,
    scaled by ``h**2`` so that ``beta = 0`` gives the standard Poisson
    stencil (4 on the diagonal, -1 off it).  Unknowns are ordered row by row.
    """
    if k < 2:
        raise ValueError("grid size k must be at least 2")
    h = 1.0 / (k + 1)
    c = abs(beta) * h
    diag = 4.0 + 2.0 * c
    # upwind side picks up the convective term
    up, down = (-1.0 - c, -1.0) if beta >= 0 else (-1.0, -1.0 - c)

    n = k * k
    idx = np.arange(n)
    ix, iy = idx % k, idx // k
    rows, cols, vals = [idx], [idx], [np.full(n, diag)]
    for shift, mask, coef in ((-1, ix > 0, up), (1, ix < k - 1, down),
                              (-k, iy > 0, up), (k, iy < k - 1, down)):
        rows.append(idx[mask])
        cols.append(idx[mask] + shift)
        vals.append(np.full(int(mask.sum()), coef))
    return CsrMatrix.from_coo(n, n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


# ------------------------------------------------------------ norms

def frobenius_norm(A: CsrMatrix) -> float:
    return float(np.linalg.norm(A.values.astype(np.float64, copy=False)))


def inf_norm(A: CsrMatrix) -> float:
    absrow = np.add.reduceat(np.abs(A.values.astype(np.float64, copy=False)), A.row_ptr[:-1]) \
        if A.nnz else np.zeros(A.n_rows)
    # reduceat yields garbage for empty rows
    absrow = np.where(np.diff(A.row_ptr) > 0, absrow, 0.0)
    return float(absrow.max(initial=0.0))


BACKWARD_ERROR_NORM = os.environ.get("MPGMRES_BACKWARD_ERROR_NORM", "inf")


def backward_error(A: CsrMatrix, x, b, norm: str | None = None, *, matrix_norm: float | None = None) -> float:
    """Normwise backward error ``||b - A x|| / (||A|| ||x|| + ||b||)`` in HIGH.

    ``norm`` selects ``"inf"`` (max-row-sum / max-abs, the default) or
    ``"fro"`` (Frobenius for ``A``, Euclidean for vectors).  A precomputed
    ``matrix_norm`` of the matching kind may be passed to skip recomputation.
    """
    norm = norm or BACKWARD_ERROR_NORM
    A = convert_precision(A, HIGH)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.size != A.n_cols or b.size != A.n_rows:
        raise ValueError("dimension mismatch")
    r = b - spmv(A, x)
    if norm == "inf":
        vnorm = lambda v: float(np.max(np.abs(v), initial=0.0))
        anorm = inf_norm(A) if matrix_norm is None else matrix_norm
    elif norm == "fro":
        vnorm = lambda v: float(np.linalg.norm(v))
        anorm = frobenius_norm(A) if matrix_norm is None else matrix_norm
    else:
        raise ValueError(f"unknown norm {norm!r}")
    denom = anorm * vnorm(x) + vnorm(b)
    if denom == 0.0:
        raise ZeroDivisionError("backward error undefined: ||A|| ||x|| + ||b|| = 0")
    return vnorm(r) / denom


def matrix_norm(A: CsrMatrix, norm: str | None = None) -> float:
    norm = norm or BACKWARD_ERROR_NORM
    return inf_norm(A) if norm == "inf" else frobenius_norm(A)


# ------------------------------------------------------------ memory model

def estimate_bytes(n: int, n_nz: int, m: int, mode: str) -> int:
    """Leading-order solver footprint in bytes (the O(m) term is dropped).

    ``double``: 24 n_nz + 8 n m + 28 n + 8 m^2
    ``mixed``:  24 n_nz + 4 n m + 32 n + 4 m^2
    """
    if mode == "double":
        return 24 * n_nz + 8 * n * m + 28 * n + 8 * m * m
    if mode == "mixed":
        return 24 * n_nz + 4 * n * m + 32 * n + 4 * m * m
    raise ValueError(f"mode must be 'double' or 'mixed', not {mode!r}")

