import numpy as np
import pytest

from mpgmres import CsrMatrix


_ACCEPTANCE_LINES: list = []


def record_criterion(number, name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] criterion {number}: {name}"
    if detail:
        line += f" ({detail})"
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_sparse(n, density, rng, dominant=True, dtype=np.float64):
    """Random sparse matrix with a full diagonal; diagonally dominant by default."""
    a = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    if dominant:
        np.fill_diagonal(a, 0.0)
        a[np.diag_indices(n)] = np.abs(a).sum(axis=1) + 1.0
    return CsrMatrix.from_dense(a, dtype=dtype), a


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
