"""Restarted, left-preconditioned GMRES with per-variable precision control.

Restarted GMRES is iterative refinement with a GMRES inner solve: the
residual ``z = b - A x`` and the update ``x += u`` are the refinement steps,
everything in between (preconditioning, Arnoldi, Givens least squares,
forming ``u``) is the correction.  :class:`PrecisionAssignment` chooses a
width for each variable; kernels always run in the width of the variable
they produce, so a preset with a uniform correction width reduces to
uniform-precision kernels plus two boundary casts.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg
from numba import njit

from .precond import IdentityPreconditioner, Ilu0Factors, ilu0_factorize
from .restart import (FixedCount, RestartContext, RestartPolicy, SMatrixMonitor, OrthLoss,
                      format_policy, should_restart)
from .sparse_core import (HIGH, LOW, CsrMatrix, Precision, backward_error, convert_precision,
                          matrix_norm, spmv)
from .trace_io import ConvergenceTrace, TraceRecord, TrueErrorProbe

__all__ = [
    "OrthScheme", "PrecisionAssignment", "DOUBLE", "SINGLE", "MIXED", "LIMITED_MIXED",
    "SINGLE_ILU", "PRESETS", "GivensRotation", "form_givens", "KrylovState", "GmresConfig",
    "Breakdown", "orthogonalize_mgs", "orthogonalize_cgs", "orthogonalize_cgsr", "arnoldi_step",
    "least_squares_update", "compute_correction", "GmresSolver", "SolveResult", "gmres_solve",
]


class OrthScheme(enum.Enum):
    MGS = "mgs"
    CGSR = "cgsr"
    CGS = "cgs"  # single pass, ablation only


@dataclass(frozen=True)
class PrecisionAssignment:
    """Storage/arithmetic width for each solver variable."""

    # refinement variables
    matrix_for_residual: Precision = HIGH
    rhs: Precision = HIGH
    solution_update: Precision = HIGH
    residual_vector: Precision = HIGH
    # correction variables
    matrix_for_krylov: Precision = HIGH
    preconditioner: Precision = HIGH
    krylov_basis: Precision = HIGH
    candidate_vector: Precision = HIGH
    hessenberg_and_givens: Precision = HIGH

    REFINEMENT = ("matrix_for_residual", "rhs", "solution_update", "residual_vector")
    CORRECTION = ("matrix_for_krylov", "preconditioner", "krylov_basis", "candidate_vector",
                  "hessenberg_and_givens")

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, Precision.of(getattr(self, f.name)))

    @classmethod
    def uniform(cls, precision) -> "PrecisionAssignment":
        p = Precision.of(precision)
        return cls(**{f.name: p for f in fields(cls)})

    def with_low(self, *names: str) -> "PrecisionAssignment":
        unknown = set(names) - {f.name for f in fields(self)}
        if unknown:
            raise ValueError(f"unknown precision variables: {sorted(unknown)}")
        return replace(self, **{name: LOW for name in names})

    def low_variables(self) -> tuple:
        return tuple(f.name for f in fields(self) if getattr(self, f.name) is LOW)

    def dtype(self, name: str) -> np.dtype:
        return getattr(self, name).dtype


DOUBLE = PrecisionAssignment()
SINGLE = PrecisionAssignment.uniform(LOW)
MIXED = DOUBLE.with_low(*PrecisionAssignment.CORRECTION)
LIMITED_MIXED = DOUBLE.with_low("matrix_for_krylov", "preconditioner", "krylov_basis")
SINGLE_ILU = DOUBLE.with_low("preconditioner")

PRESETS = {
    "double": DOUBLE,
    "single": SINGLE,
    "mixed": MIXED,
    "limited-mixed": LIMITED_MIXED,
    "single-ilu": SINGLE_ILU,
}


# ------------------------------------------------------------------ Givens

class GivensRotation(NamedTuple):
    alpha: float
    beta: float

    def apply(self, a, b):
        """Return ``[[alpha, beta], [-beta, alpha]] @ [a, b]``."""
        return self.alpha * a + self.beta * b, -self.beta * a + self.alpha * b


def form_givens(a, b) -> GivensRotation:
    """Rotation taking ``(a, b)`` to ``(hypot(a, b), 0)``, in the width of ``a``."""
    a = np.asarray(a)[()]
    dt = a.dtype if isinstance(a, np.floating) else np.dtype(np.float64)
    a, b = dt.type(a), dt.type(b)
    if b == 0:
        if a == 0:
            raise ZeroDivisionError("cannot form a Givens rotation for (0, 0)")
        return GivensRotation(dt.type(1), dt.type(0))
    r = np.hypot(a, b)
    return GivensRotation(a / r, b / r)


# ------------------------------------------------------- orthogonalization

@njit(cache=True)
def _mgs_kernel(w, V, h):
    n = w.size
    for i in range(V.shape[0]):
        acc = h[i] * 0
        for t in range(n):
            acc += w[t] * V[i, t]
        h[i] = acc
        for t in range(n):
            w[t] -= acc * V[i, t]


def _basis_as(V: np.ndarray, dt: np.dtype) -> np.ndarray:
    return np.ascontiguousarray(V, dtype=dt)


def orthogonalize_mgs(w: np.ndarray, V: np.ndarray):
    """Modified Gram-Schmidt against the rows of ``V``.

    Projects out ``V[0], V[1], ...`` one at a time, each coefficient taken
    from the partially updated ``w``.  Runs in the width of ``w``; returns a
    new ``w`` and the coefficients.
    """
    w = np.array(w, copy=True)
    h = np.zeros(V.shape[0], dtype=w.dtype)
    if V.shape[0]:
        _mgs_kernel(w, _basis_as(V, w.dtype), h)
    return w, h


def orthogonalize_cgs(w: np.ndarray, V: np.ndarray):
    """One classical Gram-Schmidt pass: ``h = V w``, ``w -= V^T h``."""
    Vd = _basis_as(V, w.dtype)
    h = Vd @ w
    return w - h @ Vd, h


def orthogonalize_cgsr(w: np.ndarray, V: np.ndarray):
    """Classical Gram-Schmidt with one re-orthogonalization pass."""
    Vd = _basis_as(V, w.dtype)
    h = Vd @ w
    w = w - h @ Vd
    h2 = Vd @ w
    return w - h2 @ Vd, h + h2


_ORTH = {
    OrthScheme.MGS: orthogonalize_mgs,
    OrthScheme.CGSR: orthogonalize_cgsr,
    OrthScheme.CGS: orthogonalize_cgs,
}


# ------------------------------------------------------------------ state

class KrylovState:
    """Per-cycle Arnoldi/least-squares data.

    Basis vectors are stored as the rows of ``V``.  ``R[:j, :j]`` holds the
    rotated (upper triangular) Hessenberg columns, ``s[:j+1]`` the rotated
    right-hand side, so ``abs(s[j])`` is the current Arnoldi residual.
    """

    def __init__(self, n: int, m: int, basis_dtype=np.float64, hess_dtype=np.float64):
        self.n, self.m = n, m
        self.V = np.zeros((m + 1, n), dtype=basis_dtype)
        self.R = np.zeros((m + 1, m), dtype=hess_dtype)
        self.alpha = np.zeros(m, dtype=hess_dtype)
        self.beta_rot = np.zeros(m, dtype=hess_dtype)
        self.s = np.zeros(m + 1, dtype=hess_dtype)
        self.H = None  # unrotated Hessenberg, only when record_hessenberg
        self.beta = 0.0
        self.j = 0
        self.outer = 0
        self.residuals: list = []
        self.basis_size = 0

    @property
    def hess_dtype(self) -> np.dtype:
        return self.R.dtype

    @property
    def basis_dtype(self) -> np.dtype:
        return self.V.dtype

    @property
    def rotations(self) -> list:
        return [GivensRotation(a, b) for a, b in zip(self.alpha[:self.j], self.beta_rot[:self.j])]

    @property
    def arnoldi_residual(self) -> float:
        return float(abs(self.s[self.j]))

    def start(self, r: np.ndarray, record_hessenberg: bool = False) -> None:
        """Begin a cycle from the preconditioned residual ``r``."""
        beta = np.linalg.norm(r)
        self.beta = float(beta)
        self.j = 0
        self.s[:] = 0
        self.s[0] = self.hess_dtype.type(beta)
        self.residuals = [float(abs(self.s[0]))]
        self.V[0] = r / beta if beta != 0 else r
        self.basis_size = 1
        if record_hessenberg:
            self.H = np.zeros((self.m + 1, self.m), dtype=self.hess_dtype)

    def basis(self) -> np.ndarray:
        return self.V[:self.basis_size]

    def nbytes(self) -> int:
        return self.V.nbytes + self.R.nbytes + self.alpha.nbytes + self.beta_rot.nbytes + self.s.nbytes


BREAKDOWN_FACTOR = 4.0


class Breakdown(NamedTuple):
    """Result of an Arnoldi step: Hessenberg column and breakdown flag."""

    h: np.ndarray
    breakdown: bool


def arnoldi_step(state: KrylovState, A: CsrMatrix, M, orth=OrthScheme.MGS,
                 candidate_dtype=None) -> Breakdown:
    """Expand the basis by one vector: ``w = M^{-1} A v_j`` orthogonalized.

    The product runs in ``A``'s width, the preconditioner in its own, and
    orthogonalization in ``candidate_dtype`` (default: the basis width).
    Returns the new Hessenberg column (length ``j+2``, in the Hessenberg
    width).  On breakdown (``h[j+1]`` at round-off level relative to the
    unorthogonalized ``w``) ``h[j+1]`` is set to 0 and no vector is appended.
    """
    j = state.j
    if j >= state.m:
        raise IndexError("Krylov basis is full")
    cdt = np.dtype(candidate_dtype or state.basis_dtype)
    w = M.apply(spmv(A, state.V[j]))
    w = w.astype(cdt, copy=False)
    w_norm = np.linalg.norm(w)
    w, h = _ORTH[OrthScheme(orth)](w, state.V[:j + 1])
    h_next = np.linalg.norm(w)
    col = np.empty(j + 2, dtype=state.hess_dtype)
    col[:j + 1] = h
    col[j + 1] = h_next
    # w annihilated down to round-off: the subspace is (numerically) invariant
    if h_next <= BREAKDOWN_FACTOR * np.finfo(cdt).eps * w_norm or not np.isfinite(h_next):
        col[j + 1] = 0
        return Breakdown(col, True)
    state.V[j + 1] = w / h_next
    state.basis_size = j + 2
    return Breakdown(col, False)


def least_squares_update(state: KrylovState, h: np.ndarray) -> KrylovState:
    """Fold Hessenberg column ``h`` (length ``j+2``) into the QR factors.

    Applies the earlier rotations, forms rotation ``j`` to annihilate
    ``h[j+1]``, rotates ``s``, and advances ``state.j``.
    """
    j = state.j
    if h.shape != (j + 2,):
        raise ValueError(f"expected a column of length {j + 2}")
    col = h.astype(state.hess_dtype, copy=True)
    if state.H is not None:
        state.H[:j + 2, j] = col
    for i in range(j):
        col[i], col[i + 1] = GivensRotation(state.alpha[i], state.beta_rot[i]).apply(col[i], col[i + 1])
    rot = form_givens(col[j], col[j + 1])
    state.alpha[j], state.beta_rot[j] = rot
    col[j], col[j + 1] = rot.apply(col[j], col[j + 1])
    col[j + 1] = 0
    state.s[j], state.s[j + 1] = rot.apply(state.s[j], state.hess_dtype.type(0))
    state.R[:j + 1, j] = col[:j + 1]
    state.j = j + 1
    state.residuals.append(float(abs(state.s[j + 1])))
    return state


def compute_correction(state: KrylovState) -> np.ndarray:
    """``u = V_j R^{-1} s`` with ``R`` the rotated Hessenberg; basis width."""
    j = state.j
    if j == 0:
        return np.zeros(state.n, dtype=state.basis_dtype)
    R = state.R[:j, :j]
    if np.any(np.diag(R) == 0):
        raise np.linalg.LinAlgError("singular triangular factor in GMRES least squares")
    y = scipy.linalg.solve_triangular(R, state.s[:j], lower=False, check_finite=False)
    y = y.astype(state.basis_dtype, copy=False)
    return y @ state.V[:j]


# ------------------------------------------------------------------ driver

@dataclass(frozen=True)
class GmresConfig:
    m: int = 300
    tol: float = 1e-10
    max_outer: int = 100
    orth: OrthScheme = OrthScheme.MGS
    precision: PrecisionAssignment = MIXED
    policy: Optional[RestartPolicy] = None
    preconditioner: str = "ilu0"
    backward_error_norm: Optional[str] = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        object.__setattr__(self, "orth", OrthScheme(self.orth))
        if isinstance(self.precision, str):
            object.__setattr__(self, "precision", PRESETS[self.precision])
        if self.policy is None:
            object.__setattr__(self, "policy", FixedCount(self.m))
        if self.preconditioner not in ("ilu0", "none"):
            raise ValueError("preconditioner must be 'ilu0' or 'none'")


@dataclass
class SolveResult:
    x: np.ndarray
    trace: ConvergenceTrace
    status: str
    backward_error: float
    cycle_lengths: list = field(default_factory=list)
    cycle_residuals: list = field(default_factory=list)
    total_inner: int = 0
    setup_time: float = 0.0
    solve_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def __iter__(self):
        return iter((self.x, self.trace, self.status))


class GmresSolver:
    """Prepared solver: precision copies of ``A`` and the preconditioner are
    built once (timed as ``setup_time``) and reused across solves."""

    def __init__(self, A: CsrMatrix, config: GmresConfig = GmresConfig()):
        if A.n_rows != A.n_cols:
            raise ValueError("GMRES needs a square matrix")
        t0 = time.perf_counter()
        self.config = cfg = config
        P = cfg.precision
        self.A = convert_precision(A, HIGH)
        self.n = A.n_rows
        self.norm_kind = cfg.backward_error_norm
        self.A_norm = matrix_norm(self.A, self.norm_kind)
        # Values are rounded to their storage width, then (exactly, when
        # widening) converted to the width of the vector each kernel produces.
        cand = P.candidate_vector
        res_store = convert_precision(self.A, P.matrix_for_residual)
        self.A_residual = convert_precision(res_store, P.residual_vector)
        self.A_krylov_storage = convert_precision(self.A, P.matrix_for_krylov)
        self.A_krylov = convert_precision(self.A_krylov_storage, cand)
        if cfg.preconditioner == "ilu0":
            self.M_storage = ilu0_factorize(self.A, P.preconditioner)
            self.M = self.M_storage
            if self.M.dtype != cand.dtype:
                self.M = Ilu0Factors(convert_precision(self.M.lu, cand), self.M.diag_ptr)
        else:
            self.M_storage = IdentityPreconditioner(self.n, P.preconditioner)
            self.M = IdentityPreconditioner(self.n, cand)
        self.setup_time = time.perf_counter() - t0

    def buffers(self) -> dict:
        """Dtypes of the long-lived solver arrays, keyed by role."""
        P = self.config.precision
        return {
            "A_residual": self.A_residual.dtype,
            "A_krylov": self.A_krylov_storage.dtype,
            "preconditioner": self.M_storage.dtype,
            "krylov_basis": P.dtype("krylov_basis"),
            "hessenberg": P.dtype("hessenberg_and_givens"),
            "solution": P.dtype("solution_update"),
        }

    def workspace_nbytes(self) -> int:
        """Bytes held by matrices, factors, basis and small dense arrays."""
        cfg, P = self.config, self.config.precision
        n, m = self.n, cfg.m
        total = self.A.nbytes
        extra = {id(a): a for a in (self.A_krylov_storage, self.A_krylov, self.A_residual)
                 if a is not self.A}
        total += sum(a.values.nbytes for a in extra.values())
        total += self.M_storage.nbytes
        if self.M is not self.M_storage:
            total += self.M.nbytes
        total += (m + 1) * n * P.dtype("krylov_basis").itemsize
        total += ((m + 1) * m + 3 * m + 1) * P.dtype("hessenberg_and_givens").itemsize
        total += n * (P.dtype("solution_update").itemsize + P.dtype("rhs").itemsize
                      + P.dtype("residual_vector").itemsize + P.dtype("candidate_vector").itemsize)
        return int(total)

    def solve(self, b, x0=None, probe: Optional[TrueErrorProbe] = None,
              monitor: Optional[SMatrixMonitor] = None, record_hessenberg: bool = False,
              metadata: Optional[dict] = None) -> SolveResult:
        cfg, P = self.config, self.config.precision
        n, m = self.n, cfg.m
        b_hi = np.asarray(b, dtype=np.float64)
        if b_hi.shape != (n,):
            raise ValueError(f"right-hand side has shape {b_hi.shape}, expected ({n},)")
        b_store = convert_precision(b_hi, P.rhs)
        sol_dt = P.dtype("solution_update")
        res_dt = P.dtype("residual_vector")
        cand_dt = P.dtype("candidate_vector")
        x = np.zeros(n, dtype=sol_dt) if x0 is None else convert_precision(np.asarray(x0, dtype=np.float64), P.solution_update).copy()
        b_res = b_store.astype(res_dt, copy=False)

        if isinstance(cfg.policy, OrthLoss) and monitor is None:
            monitor = SMatrixMonitor()
        state = KrylovState(n, m, P.dtype("krylov_basis"), P.dtype("hessenberg_and_givens"))
        trace = ConvergenceTrace(metadata={"n": n, "n_nz": self.A.nnz, "m": m, "tol": cfg.tol,
                                           "orth": cfg.orth.value, "policy": format_policy(cfg.policy),
                                           "precision_low": ",".join(P.low_variables()),
                                           **(metadata or {})})
        # residual in HIGH against the original data can double as the stop test
        exact_residual = (P.matrix_for_residual is HIGH and P.rhs is HIGH and res_dt == np.float64)

        t_start = time.perf_counter()
        instr = 0.0
        cycle_lengths, cycle_residuals = [], []
        total_inner = 0
        status, be = "exhausted", float("nan")

        def clock():
            return time.perf_counter() - t_start - instr

        k = 0
        while True:
            z = b_res - spmv(self.A_residual, x)
            if exact_residual and sol_dt == np.float64:
                be = self._backward_error_from_residual(z, x, b_hi)
            else:
                be = backward_error(self.A, x, b_hi, self.norm_kind, matrix_norm=self.A_norm)
            r = self.M.apply(z)
            state.start(r, record_hessenberg)
            cycle_residuals.append(state.beta)
            done = be <= cfg.tol
            # a zero working-precision residual leaves nothing to correct
            stuck = state.beta == 0
            if done or stuck or k >= cfg.max_outer or total_inner >= cfg.max_outer * m:
                status = "converged" if done else "exhausted"
                trace.append(TraceRecord(k + 1, 0, state.beta, be, status, clock()))
                break
            k += 1
            state.outer = k
            if monitor is not None:
                monitor.reset()
                monitor.append(state.V[:0], state.V[0])

            event = "restart"
            while True:
                step = arnoldi_step(state, self.A_krylov, self.M, cfg.orth, cand_dt)
                least_squares_update(state, step.h)
                total_inner += 1
                j = state.j
                if monitor is not None and not step.breakdown:
                    monitor.append(state.V[:j], state.V[j])
                sample = None
                if probe is not None and probe.due(total_inner):
                    t0 = time.perf_counter()
                    cand = (x + compute_correction(state).astype(sol_dt, copy=False)).astype(np.float64)
                    sample = backward_error(self.A, cand, b_hi, self.norm_kind, matrix_norm=self.A_norm)
                    probe.record(k, j, cand)
                    instr += time.perf_counter() - t0
                if step.breakdown:
                    trace.append(TraceRecord(k, j, state.arnoldi_residual, sample, "breakdown", clock()))
                    break
                ctx = RestartContext(j, m, state.residuals, k - 1,
                                     cycle_lengths[0] if cycle_lengths else None, monitor)
                if should_restart(cfg.policy, ctx) or total_inner >= cfg.max_outer * m:
                    trace.append(TraceRecord(k, j, state.arnoldi_residual, sample, event, clock()))
                    break
                trace.append(TraceRecord(k, j, state.arnoldi_residual, sample, "none", clock()))

            cycle_lengths.append(state.j)
            u = compute_correction(state)
            x = x + u.astype(sol_dt, copy=False)

        x_hi = x.astype(np.float64)
        return SolveResult(x_hi, trace, status, be, cycle_lengths, cycle_residuals, total_inner,
                           self.setup_time, clock())

    def _backward_error_from_residual(self, z, x, b):
        if (self.norm_kind or _default_norm()) == "inf":
            vn = lambda v: float(np.max(np.abs(v), initial=0.0))
        else:
            vn = lambda v: float(np.linalg.norm(v))
        denom = self.A_norm * vn(x) + vn(b)
        if denom == 0:
            raise ZeroDivisionError("backward error undefined: ||A|| ||x|| + ||b|| = 0")
        return vn(z) / denom


def _default_norm():
    from . import sparse_core
    return sparse_core.BACKWARD_ERROR_NORM


def gmres_solve(A: CsrMatrix, b, x0=None, config: GmresConfig = GmresConfig(),
                probe: Optional[TrueErrorProbe] = None, **kwargs) -> SolveResult:
    """Solve ``A x = b`` with restarted left-preconditioned GMRES.

    Stops when the normwise backward error of ``x`` (computed in HIGH against
    the original ``A`` and ``b``) reaches ``config.tol`` or when the cycle /
    inner-iteration budget runs out.
    """
    return GmresSolver(A, config).solve(b, x0, probe=probe, **kwargs)
