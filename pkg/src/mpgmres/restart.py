"""Restart-initiation policies and the S-matrix orthogonality-loss monitor.

A policy is a small frozen dataclass; :func:`should_restart` is the pure
predicate the solver consults after every inner iteration.  Every policy
also restarts unconditionally once the cycle reaches ``m`` iterations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "FixedCount", "ImprovementThreshold", "ImprovementThenRepeat", "StallDetect",
    "OrthLoss", "RestartPolicy", "RestartContext", "SMatrixMonitor",
    "should_restart", "parse_policy", "format_policy", "stall_window",
    "iterations_to_stall", "smonitor_append", "smonitor_spectral_norm",
    "smonitor_frobenius_norm",
]


@dataclass(frozen=True)
class FixedCount:
    iterations: int

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("FixedCount needs at least one iteration")


@dataclass(frozen=True)
class ImprovementThreshold:
    """Restart once the Arnoldi residual has dropped by ``delta`` relative to
    the cycle's starting residual."""

    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class ImprovementThenRepeat:
    """Improvement threshold for the first cycle; later cycles reuse its length."""

    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")


@dataclass(frozen=True)
class StallDetect:
    window_fraction: float = 0.05
    factor: float = 1.001

    def __post_init__(self):
        if not 0.0 < self.window_fraction <= 1.0:
            raise ValueError("window_fraction must lie in (0, 1]")
        if not self.factor > 1.0:
            raise ValueError("factor must exceed 1")


@dataclass(frozen=True)
class OrthLoss:
    norm_kind: str = "spectral"
    threshold: Optional[float] = None
    power_iters: int = 10

    def __post_init__(self):
        if self.norm_kind not in ("spectral", "frobenius"):
            raise ValueError("norm_kind must be 'spectral' or 'frobenius'")
        if self.threshold is None:
            object.__setattr__(self, "threshold", 0.5 if self.norm_kind == "spectral" else 1.0)
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")


RestartPolicy = Union[FixedCount, ImprovementThreshold, ImprovementThenRepeat, StallDetect, OrthLoss]


@dataclass
class RestartContext:
    """What a policy may look at.

    ``residuals[i]`` is the Arnoldi residual after ``i`` inner iterations of
    the current cycle (``residuals[0]`` is the cycle's starting residual).
    """

    j: int
    m: int
    residuals: Sequence[float]
    cycle: int = 0
    first_cycle_length: Optional[int] = None
    monitor: Optional["SMatrixMonitor"] = None


def stall_window(window_fraction: float, m: int) -> int:
    # guard against 0.05*300 == 15.000000000000002
    return max(1, math.ceil(round(window_fraction * m, 9)))


def should_restart(policy: RestartPolicy, ctx: RestartContext) -> bool:
    j = ctx.j
    if j <= 0:
        return False
    if j >= ctx.m:
        return True
    res = ctx.residuals
    if isinstance(policy, FixedCount):
        return j >= policy.iterations
    if isinstance(policy, ImprovementThreshold):
        return res[j] <= policy.delta * res[0]
    if isinstance(policy, ImprovementThenRepeat):
        if ctx.cycle == 0 or ctx.first_cycle_length is None:
            return res[j] <= policy.delta * res[0]
        return j >= ctx.first_cycle_length
    if isinstance(policy, StallDetect):
        w = stall_window(policy.window_fraction, ctx.m)
        if j < w or res[j] == 0:
            return False
        return res[j - w] / res[j] < policy.factor
    if isinstance(policy, OrthLoss):
        if ctx.monitor is None:
            raise ValueError("OrthLoss policy requires an S-matrix monitor")
        if policy.norm_kind == "spectral":
            value = ctx.monitor.spectral_norm(policy.power_iters)
        else:
            value = ctx.monitor.frobenius_norm()
        return value >= policy.threshold
    raise TypeError(f"not a restart policy: {policy!r}")


def iterations_to_stall(residuals: Sequence[float], m: int, window_fraction: float = 0.05,
                        factor: float = 1.001) -> Optional[int]:
    """First iteration ``j`` after which the next ``ceil(window_fraction*m)``
    iterations improve the Arnoldi residual by less than ``factor``.

    Returns None when the recorded history never stalls.
    """
    w = stall_window(window_fraction, m)
    res = np.asarray(residuals, dtype=np.float64)
    for j in range(res.size - w):
        if res[j + w] > 0 and res[j] / res[j + w] < factor:
            return j
    return None


def parse_policy(text: str) -> RestartPolicy:
    """Parse ``fixed:M``, ``improve:D``, ``improve-repeat:D``, ``stall:W:F``,
    ``orthloss:spectral:I:TAU`` or ``orthloss:frob:TAU``."""
    parts = text.strip().split(":")
    kind, args = parts[0].lower(), parts[1:]
    try:
        if kind == "fixed" and len(args) == 1:
            return FixedCount(int(args[0]))
        if kind == "improve" and len(args) == 1:
            return ImprovementThreshold(float(args[0]))
        if kind == "improve-repeat" and len(args) == 1:
            return ImprovementThenRepeat(float(args[0]))
        if kind == "stall" and len(args) == 2:
            return StallDetect(float(args[0]), float(args[1]))
        if kind == "orthloss" and args:
            sub = args[0].lower()
            if sub == "spectral" and len(args) in (1, 2, 3):
                iters = int(args[1]) if len(args) > 1 else 10
                tau = float(args[2]) if len(args) > 2 else None
                return OrthLoss("spectral", tau, iters)
            if sub in ("frob", "frobenius") and len(args) in (1, 2):
                return OrthLoss("frobenius", float(args[1]) if len(args) > 1 else None)
    except ValueError as exc:
        raise ValueError(f"bad restart policy {text!r}: {exc}") from None
    raise ValueError(f"bad restart policy {text!r}")


def format_policy(policy: RestartPolicy) -> str:
    if isinstance(policy, FixedCount):
        return f"fixed:{policy.iterations}"
    if isinstance(policy, ImprovementThreshold):
        return f"improve:{policy.delta:g}"
    if isinstance(policy, ImprovementThenRepeat):
        return f"improve-repeat:{policy.delta:g}"
    if isinstance(policy, StallDetect):
        return f"stall:{policy.window_fraction:g}:{policy.factor:g}"
    if isinstance(policy, OrthLoss):
        if policy.norm_kind == "spectral":
            return f"orthloss:spectral:{policy.power_iters}:{policy.threshold:g}"
        return f"orthloss:frob:{policy.threshold:g}"
    raise TypeError(policy)


# ----------------------------------------------------------------- S-matrix

@dataclass
class SMatrixMonitor:
    """Incrementally maintained ``S_k = (I + U_k)^{-1} U_k``.

    ``U_k`` is the strictly upper part of ``V_k^T V_k`` for the first ``k``
    basis vectors.  Appending a vector adds one column to both ``U`` and
    ``S``; earlier columns never change.  Arithmetic runs in ``dtype``
    (HIGH by default, with LOW basis vectors upcast exactly).
    """

    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float64))
    k: int = 0
    _U: np.ndarray = field(default=None, repr=False)
    _S: np.ndarray = field(default=None, repr=False)
    _frob_sq: float = 0.0

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        if self._U is None:
            self._U = np.zeros((8, 8), dtype=self.dtype)
            self._S = np.zeros((8, 8), dtype=self.dtype)

    @property
    def U(self) -> np.ndarray:
        return self._U[:self.k, :self.k]

    @property
    def S(self) -> np.ndarray:
        return self._S[:self.k, :self.k]

    def reset(self) -> None:
        self.k = 0
        self._frob_sq = 0.0
        self._U[:] = 0
        self._S[:] = 0

    def _grow(self):
        cap = self._U.shape[0]
        if self.k < cap:
            return
        for name in ("_U", "_S"):
            old = getattr(self, name)
            new = np.zeros((2 * cap, 2 * cap), dtype=self.dtype)
            new[:cap, :cap] = old
            setattr(self, name, new)

    def append(self, V_k: np.ndarray, v_new: np.ndarray) -> "SMatrixMonitor":
        """Add ``v_new`` as column ``k+1``; ``V_k`` holds the previous ``k``
        basis vectors as rows."""
        k = self.k
        if V_k.shape[0] != k:
            raise ValueError(f"monitor has {k} columns but V_k has {V_k.shape[0]} rows")
        self._grow()
        if k:
            u_col = V_k.astype(self.dtype, copy=False) @ v_new.astype(self.dtype, copy=False)
            self._U[:k, k] = u_col
            s_col = _unit_upper_solve(self._U[:k, :k], u_col)
            self._S[:k, k] = s_col
            self._frob_sq += float(np.dot(s_col, s_col))
        self.k = k + 1
        return self

    @classmethod
    def from_strict_upper(cls, S: np.ndarray) -> "SMatrixMonitor":
        """Monitor holding a given strictly upper ``S`` (``U`` left empty)."""
        S = np.triu(np.asarray(S, dtype=np.float64), 1)
        k = S.shape[0]
        mon = cls(k=k, _U=np.zeros((max(k, 1), max(k, 1))), _S=np.zeros((max(k, 1), max(k, 1))))
        mon._S[:k, :k] = S
        mon._frob_sq = float(np.sum(S * S))
        return mon

    def frobenius_norm(self) -> float:
        return math.sqrt(self._frob_sq)

    def spectral_norm(self, power_iters: int = 10) -> float:
        """Power-method estimate of ``||S||_2`` from an all-ones start."""
        if power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        k = self.k
        if k == 0:
            return 0.0
        S = self._S[:k, :k]
        x = np.full(k, 1.0 / math.sqrt(k), dtype=self.dtype)
        for _ in range(power_iters):
            # S is strictly upper: S@x only needs rows 0..k-2, S.T@y columns 1..k-1
            y = S[:-1, 1:] @ x[1:]
            x = np.zeros(k, dtype=self.dtype)
            x[1:] = S[:-1, 1:].T @ y
            nx = np.linalg.norm(x)
            if nx == 0:
                return 0.0
            x /= nx
        return float(np.linalg.norm(S[:-1, 1:] @ x[1:]))


def _unit_upper_solve(U: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(I + U) s = rhs`` for strictly upper ``U``."""
    s = rhs.copy()
    for i in range(s.size - 2, -1, -1):
        s[i] -= U[i, i + 1:] @ s[i + 1:]
    return s


def smonitor_append(monitor: SMatrixMonitor, V_k: np.ndarray, v_new: np.ndarray) -> SMatrixMonitor:
    return monitor.append(V_k, v_new)


def smonitor_spectral_norm(monitor: SMatrixMonitor, power_iters: int = 10) -> float:
    return monitor.spectral_norm(power_iters)


def smonitor_frobenius_norm(monitor: SMatrixMonitor) -> float:
    return monitor.frobenius_norm()
