"""Mixed-precision restarted GMRES with ILU(0) and restart strategies."""
from .sparse_core import (HIGH, LOW, CsrMatrix, Precision, PrecisionOverflowError, MatrixMarketError,
                          axpy, backward_error, convert_precision, dot, estimate_bytes,
                          gen_convdiff2d, norm2, read_matrix_market, scale, spmv,
                          write_matrix_market)
from .precond import FactorizationError, IdentityPreconditioner, Ilu0Factors, ilu0_apply, ilu0_factorize
from .restart import (FixedCount, ImprovementThenRepeat, ImprovementThreshold, OrthLoss,
                      SMatrixMonitor, StallDetect, parse_policy, should_restart)
from .krylov import (DOUBLE, LIMITED_MIXED, MIXED, PRESETS, SINGLE, SINGLE_ILU, GmresConfig,
                     GmresSolver, OrthScheme, PrecisionAssignment, SolveResult, gmres_solve)
from .trace_io import ConvergenceTrace, TraceRecord, read_csv, trace_true_error_every, write_csv

__version__ = "0.1.0"
