"""Experiment runner: convergence traces and timing comparisons."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import statistics
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .krylov import PRESETS, GmresConfig, GmresSolver, OrthScheme, PrecisionAssignment, SolveResult
from .restart import FixedCount, format_policy, parse_policy
from .sparse_core import CsrMatrix, gen_convdiff2d, read_matrix_market, spmv
from .trace_io import TrueErrorProbe, write_csv

log = logging.getLogger("mpgmres")

THREADS_ENV = "MPGMRES_NUM_THREADS"


@dataclass
class ExperimentSpec:
    matrix: str = "convdiff:40:1"
    preset: str = "mixed"
    low: tuple = ()
    orth: str = "mgs"
    policy: Optional[str] = None
    tol: float = 1e-10
    m: int = 300
    max_outer: int = 100
    seed: int = 0
    stride: Optional[int] = None
    precond: str = "ilu0"
    repetitions: int = 1
    trace_out: Optional[str] = None
    summary_out: Optional[str] = None
    rhs: Optional[str] = None

    def precision(self) -> PrecisionAssignment:
        if self.preset == "custom":
            base = PRESETS["double"]
        elif self.preset in PRESETS:
            base = PRESETS[self.preset]
        else:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)} or 'custom'")
        return base.with_low(*self.low) if self.low else base

    def config(self) -> GmresConfig:
        policy = parse_policy(self.policy) if self.policy else FixedCount(self.m)
        return GmresConfig(m=self.m, tol=self.tol, max_outer=self.max_outer, orth=OrthScheme(self.orth),
                           precision=self.precision(), policy=policy, preconditioner=self.precond)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    result: SolveResult
    times: list
    x_true: np.ndarray
    b: np.ndarray
    matrix_name: str
    n: int
    n_nz: int

    @property
    def median_time(self) -> float:
        return statistics.median(self.times)

    def summary(self) -> dict:
        r = self.result
        return {
            "matrix": self.matrix_name, "n": self.n, "n_nz": self.n_nz,
            "preset": self.spec.preset, "low": ",".join(self.spec.low), "orth": self.spec.orth,
            "policy": format_policy(self.spec.config().policy), "m": self.spec.m,
            "status": r.status, "cycles": len(r.cycle_lengths), "total_inner": r.total_inner,
            "cycle_lengths": " ".join(map(str, r.cycle_lengths)),
            "backward_error": f"{r.backward_error:.6e}",
            "forward_error": f"{np.max(np.abs(r.x - self.x_true)) / np.max(np.abs(self.x_true)):.6e}",
            "repetitions": len(self.times), "median_s": f"{self.median_time:.6f}",
            "min_s": f"{min(self.times):.6f}", "max_s": f"{max(self.times):.6f}",
        }


def load_matrix(source: str) -> tuple:
    """``convdiff:K:BETA`` builds a generated problem; anything else is a
    Matrix Market path."""
    if source.startswith("convdiff:"):
        parts = source.split(":")
        if len(parts) != 3:
            raise ValueError("generator spec is convdiff:K:BETA")
        return gen_convdiff2d(int(parts[1]), float(parts[2])), source
    path = Path(source)
    return read_matrix_market(path), path.stem


def make_rhs(A: CsrMatrix, seed: int) -> tuple:
    """Seeded uniform(0, 1) solution and ``b = A x``."""
    rng = np.random.default_rng(seed)
    x_true = rng.uniform(0.0, 1.0, A.n_cols)
    return x_true, spmv(A, x_true)


def run_experiment(spec: ExperimentSpec, A: Optional[CsrMatrix] = None, name: Optional[str] = None) -> ExperimentResult:
    if A is None:
        A, name = load_matrix(spec.matrix)
    if spec.rhs:
        b = np.loadtxt(spec.rhs, dtype=np.float64)
        x_true = np.full(A.n_cols, np.nan)
    else:
        x_true, b = make_rhs(A, spec.seed)
    config = spec.config()
    times, result = [], None
    for rep in range(max(1, spec.repetitions)):
        probe = TrueErrorProbe(spec.stride) if spec.stride else None
        t0 = time.perf_counter()
        solver = GmresSolver(A, config)
        res = solver.solve(b, probe=probe, metadata={"matrix": name, "preset": spec.preset})
        elapsed = time.perf_counter() - t0
        if probe is not None:
            # instrumentation is not part of the measured runtime
            elapsed = res.setup_time + res.solve_time
        times.append(elapsed)
        log.debug("repetition %d: %.4fs %s", rep, elapsed, res.status)
        result = result or res
    out = ExperimentResult(spec, result, times, x_true, b, name or "matrix", A.n_rows, A.nnz)
    if spec.trace_out:
        write_csv(result.trace, spec.trace_out)
    if spec.summary_out:
        _write_rows(spec.summary_out, [out.summary()])
    return out


def _write_rows(path, rows: Sequence[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def geometric_mean(values: Sequence[float]) -> float:
    values = list(values)
    if not values or any(v <= 0 for v in values):
        raise ValueError("geometric mean needs positive values")
    return math.exp(sum(math.log(v) for v in values) / len(values))


def calibrate_restart(A: CsrMatrix, spec: ExperimentSpec, name: str = "") -> int:
    """Inner iterations the baseline needs to reach ``spec.tol``, halved."""
    x_true, b = make_rhs(A, spec.seed)
    probe = TrueErrorProbe(1)
    cfg = replace(spec, policy=None).config()
    res = GmresSolver(A, cfg).solve(b, probe=probe)
    count = 0
    for rec in res.trace:
        if rec.inner > 0:
            count += 1
        if rec.true_backward_error is not None and rec.true_backward_error <= spec.tol:
            return max(1, count // 2)
    raise RuntimeError(f"baseline did not reach tol={spec.tol:g} on {name or spec.matrix}")


def run_comparison(specs: Sequence[ExperimentSpec], baseline: str = "double",
                   calibrate: bool = False, out: Optional[str] = None) -> list:
    """Median-time speedup of every preset relative to ``baseline``, per
    matrix, plus a geometric-mean row per preset."""
    by_matrix: dict = {}
    for s in specs:
        by_matrix.setdefault(s.matrix, []).append(s)
    rows, speedups = [], {}
    for source, group in by_matrix.items():
        presets = [s.preset for s in group]
        if baseline not in presets or len(group) < 2:
            raise ValueError(f"comparison on {source} needs the baseline {baseline!r} and another run")
        keys = {(s.orth, s.policy, s.m, s.tol, s.seed, s.precond) for s in group}
        if len(keys) != 1:
            raise ValueError(f"specs for {source} differ in more than the preset")
        A, name = load_matrix(source)
        if calibrate:
            base_spec = next(s for s in group if s.preset == baseline)
            restart = calibrate_restart(A, base_spec, name)
            group = [replace(s, policy=f"fixed:{restart}") for s in group]
            log.info("%s: restarting every %d iterations", name, restart)
        # a repeated baseline entry is timed separately (self-comparison)
        results = [run_experiment(s, A, name) for s in group]
        base_idx = presets.index(baseline)
        base = results[base_idx]
        for i, res in enumerate(results):
            preset = res.spec.preset
            speedup = base.median_time / res.median_time
            if i != base_idx:
                speedups.setdefault(preset, []).append(speedup)
            rows.append({"matrix": name, "preset": preset, "orth": res.spec.orth,
                         "policy": format_policy(res.spec.config().policy),
                         "status": res.result.status, "total_inner": res.result.total_inner,
                         "median_s": f"{res.median_time:.6f}", "min_s": f"{min(res.times):.6f}",
                         "max_s": f"{max(res.times):.6f}", "speedup": f"{speedup:.4f}"})
    for preset, values in speedups.items():
        rows.append({"matrix": "GEOMEAN", "preset": preset, "orth": "", "policy": "", "status": "",
                     "total_inner": "", "median_s": "", "min_s": "", "max_s": "",
                     "speedup": f"{geometric_mean(values):.4f}"})
    if out:
        _write_rows(out, rows)
    return rows


def set_threads(count: Optional[int]) -> int:
    import numba

    if count is None:
        env = os.environ.get(THREADS_ENV)
        count = int(env) if env else numba.config.NUMBA_NUM_THREADS
    count = max(1, min(int(count), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(count)
    return count


def _common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--orth", choices=[o.value for o in OrthScheme], default="mgs")
    p.add_argument("--policy", help="fixed:M | improve:D | improve-repeat:D | stall:W:F | "
                                    "orthloss:spectral:I:TAU | orthloss:frob:TAU (default fixed:m)")
    p.add_argument("--tol", type=float, default=1e-10, help="target backward error")
    p.add_argument("-m", "--m", type=int, default=300, help="max inner iterations per cycle")
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precond", choices=["ilu0", "none"], default="ilu0")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--threads", type=int, help=f"kernel threads (default ${THREADS_ENV} or all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpgmres", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve one system and write its trace")
    run.add_argument("matrix", help="Matrix Market file or convdiff:K:BETA")
    run.add_argument("--preset", default="mixed", choices=sorted(PRESETS) + ["custom"])
    run.add_argument("--low", default="", help="comma-separated variables forced to single precision")
    run.add_argument("--rhs", help="text file with b (default: b = A x, x ~ U(0,1))")
    run.add_argument("--stride", type=int, help="record true backward error every N inner iterations")
    run.add_argument("--trace-out", help="trace CSV path")
    run.add_argument("--summary-out", help="summary CSV path")
    _common_args(run)

    cmp_ = sub.add_parser("compare", help="median-time speedups against a baseline preset")
    cmp_.add_argument("matrices", nargs="+", help="Matrix Market files or convdiff:K:BETA")
    cmp_.add_argument("--presets", default="double,mixed,single-ilu")
    cmp_.add_argument("--baseline", default="double")
    cmp_.add_argument("--calibrate", action="store_true",
                      help="restart after half the iterations the baseline needs")
    cmp_.add_argument("--out", help="speedup table CSV path")
    _common_args(cmp_)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    threads = set_threads(args.threads)
    common = dict(orth=args.orth, policy=args.policy, tol=args.tol, m=args.m, max_outer=args.max_outer,
                  seed=args.seed, precond=args.precond, repetitions=args.repetitions)
    try:
        if args.command == "run":
            low = tuple(v for v in args.low.split(",") if v)
            spec = ExperimentSpec(matrix=args.matrix, preset=args.preset, low=low, stride=args.stride,
                                  trace_out=args.trace_out, summary_out=args.summary_out, rhs=args.rhs,
                                  **common)
            res = run_experiment(spec)
            s = res.summary()
            print(" ".join(f"{k}={v}" for k, v in s.items()) + f" threads={threads}")
            return 0 if res.result.converged else 1
        presets = [p for p in args.presets.split(",") if p]
        specs = [ExperimentSpec(matrix=mx, preset=p, **common) for mx in args.matrices for p in presets]
        rows = run_comparison(specs, args.baseline, args.calibrate, args.out)
        for row in rows:
            print(" ".join(f"{k}={v}" for k, v in row.items() if v != ""))
        return 0 if all(r["status"] in ("converged", "") for r in rows) else 1
    except (OSError, ValueError) as exc:
        print(f"mpgmres: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
