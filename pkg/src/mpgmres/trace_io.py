"""Per-iteration convergence traces and their CSV form."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = ["TraceRecord", "ConvergenceTrace", "TrueErrorProbe", "trace_true_error_every",
           "write_csv", "read_csv", "CSV_HEADER", "EVENTS"]

CSV_HEADER = ["outer", "inner", "arnoldi_residual", "backward_error", "event", "elapsed_s"]
EVENTS = ("none", "restart", "breakdown", "converged", "exhausted")


@dataclass
class TraceRecord:
    outer: int
    inner: int
    arnoldi_residual: float
    true_backward_error: Optional[float] = None
    event: str = "none"
    elapsed: float = 0.0

    def __post_init__(self):
        if self.event not in EVENTS:
            raise ValueError(f"unknown event {self.event!r}")


@dataclass
class ConvergenceTrace:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, record: TraceRecord) -> None:
        if self.records:
            last = self.records[-1]
            if (record.outer, record.inner) <= (last.outer, last.inner):
                raise ValueError("trace records must be strictly increasing in (outer, inner)")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def final(self) -> Optional[TraceRecord]:
        return self.records[-1] if self.records else None

    def cycle_residuals(self, outer: int) -> list:
        return [r.arnoldi_residual for r in self.records if r.outer == outer and r.inner > 0]

    def backward_errors(self) -> np.ndarray:
        return np.array([r.true_backward_error for r in self.records
                         if r.true_backward_error is not None])


class TrueErrorProbe:
    """Instrumentation hook: every ``stride``-th inner iteration the solver
    materialises the candidate solution in HIGH and records its backward
    error.  Time spent here is excluded from the trace's elapsed column.

    With ``keep_solutions`` the candidates themselves are retained in
    ``solutions`` (keyed by ``(outer, inner)``) for offline checks.
    """

    def __init__(self, stride: int = 1, keep_solutions: bool = False):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = int(stride)
        self.keep_solutions = keep_solutions
        self.solutions: dict = {}
        self.samples = 0

    def due(self, total_inner: int) -> bool:
        return total_inner % self.stride == 0

    def record(self, outer: int, inner: int, x: np.ndarray) -> None:
        self.samples += 1
        if self.keep_solutions:
            self.solutions[(outer, inner)] = x.copy()


def trace_true_error_every(stride: int, keep_solutions: bool = False) -> TrueErrorProbe:
    return TrueErrorProbe(stride, keep_solutions)


def _fmt(x: Optional[float]) -> str:
    if x is None:
        return ""
    return repr(float(x)) if not math.isfinite(x) else f"{x:.17g}"


def write_csv(trace: ConvergenceTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in trace.records:
            w.writerow([r.outer, r.inner, _fmt(r.arnoldi_residual), _fmt(r.true_backward_error),
                        r.event, _fmt(r.elapsed)])


def read_csv(path) -> ConvergenceTrace:
    trace = ConvergenceTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trace header {header!r}")
        for row in rows:
            outer, inner, res, be, event, elapsed = row
            trace.append(TraceRecord(int(outer), int(inner), float(res),
                                     float(be) if be else None, event, float(elapsed)))
    return trace
