import numpy as np
import pytest
import scipy.io
import scipy.sparse
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mpgmres import sparse_core as sc
from mpgmres.sparse_core import (HIGH, LOW, CsrMatrix, MatrixMarketError, Precision,
                                 PrecisionOverflowError)

from conftest import random_sparse


# ---------------------------------------------------------------- CsrMatrix

def test_csr_invariants_enforced():
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0]), np.array([1.0]))
    with pytest.raises(ValueError):
        CsrMatrix(1, 2, np.array([0, 2]), np.array([1, 0]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        CsrMatrix(1, 2, np.array([0, 1]), np.array([2]), np.array([1.0]))


def test_from_coo_sums_duplicates_and_sorts():
    A = CsrMatrix.from_coo(2, 2, [1, 0, 0, 0], [0, 1, 0, 1], [5.0, 1.0, 2.0, 3.0])
    assert A.nnz == 3
    np.testing.assert_array_equal(A.toarray(), [[2.0, 4.0], [5.0, 0.0]])
    np.testing.assert_array_equal(A.col_idx[:2], [0, 1])


def test_index_arrays_are_four_bytes():
    A = sc.gen_convdiff2d(4, 1.0)
    assert A.row_ptr.dtype == np.int32 and A.col_idx.dtype == np.int32


# ---------------------------------------------------------------- spmv

def test_spmv_identity():
    y = sc.spmv(CsrMatrix.identity(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(y, [1, 2, 3])


def test_spmv_laplacian_constant_vector():
    a = 2 * np.eye(4) - np.eye(4, k=1) - np.eye(4, k=-1)
    y = sc.spmv(CsrMatrix.from_dense(a), np.ones(4))
    np.testing.assert_array_equal(y, [1, 0, 0, 1])


def test_spmv_random_matches_dense(rng):
    a = rng.standard_normal((8, 8)) * (rng.random((8, 8)) < 0.5)
    x = rng.standard_normal(8)
    y = sc.spmv(CsrMatrix.from_dense(a), x)
    ref = a @ x
    scale = np.abs(a) @ np.abs(x)
    assert np.all(np.abs(y - ref) <= 1e-14 * scale + 1e-300)


def test_spmv_low_computes_in_low(rng):
    A, a = random_sparse(10, 0.4, rng)
    A32 = sc.convert_precision(A, LOW)
    y = sc.spmv(A32, rng.standard_normal(10))
    assert y.dtype == np.float32


def test_spmv_dimension_mismatch():
    with pytest.raises(ValueError):
        sc.spmv(CsrMatrix.identity(3), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 64), density=st.floats(0.05, 1.0), seed=st.integers(0, 2**31))
def test_spmv_property_dense_oracle(n, density, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((n, n)) * (r.random((n, n)) < density)
    x = r.standard_normal(n)
    y = sc.spmv(CsrMatrix.from_dense(a), x)
    bound = 1e-14 * (np.abs(a) @ np.abs(x))
    assert np.all(np.abs(y - a @ x) <= bound)


# ---------------------------------------------------------------- vectors

def test_vector_kernels():
    assert sc.dot(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0
    assert sc.norm2(np.array([3.0, 4.0])) == 5
    np.testing.assert_array_equal(sc.axpy(2, np.array([1.0, 1.0]), np.array([1.0, 0.0])), [3, 2])
    np.testing.assert_array_equal(sc.scale(2, np.array([1.0, -1.0])), [2, -2])


def test_vector_kernels_dimension_mismatch():
    with pytest.raises(ValueError):
        sc.dot(np.ones(2), np.ones(3))
    with pytest.raises(ValueError):
        sc.axpy(1.0, np.ones(2), np.ones(3))


def test_axpy_width_follows_y():
    y = sc.axpy(1.0, np.ones(3), np.ones(3, dtype=np.float32))
    assert y.dtype == np.float32


# ---------------------------------------------------------------- precision

def test_precision_enum():
    assert Precision.of("single") is LOW
    assert Precision.of(np.float64) is HIGH
    assert LOW.dtype == np.float32 and HIGH.dtype == np.float64


def test_convert_examples():
    x = sc.convert_precision(np.array([1.0, 0.5]), LOW)
    assert x.dtype == np.float32
    np.testing.assert_array_equal(x, [1.0, 0.5])
    assert sc.convert_precision(np.array([1 + 2.0**-30]), LOW)[0] == np.float32(1.0)


def test_convert_overflow_raises():
    with pytest.raises(PrecisionOverflowError):
        sc.convert_precision(np.array([1.0, 1e39]), LOW)
    A = CsrMatrix.from_dense(np.array([[1e40]]))
    with pytest.raises(PrecisionOverflowError):
        sc.convert_precision(A, LOW)


def test_convert_matrix_shares_pattern(rng):
    A, _ = random_sparse(6, 0.5, rng)
    B = sc.convert_precision(A, LOW)
    assert B.dtype == np.float32 and B.col_idx is A.col_idx


@given(hnp.arrays(np.float32, st.integers(1, 20),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_low_high_low_round_trip_is_identity(x):
    back = sc.convert_precision(sc.convert_precision(x, HIGH), LOW)
    np.testing.assert_array_equal(back, x)


@given(hnp.arrays(np.float64, st.integers(1, 20),
                  elements=st.floats(-3e38, 3e38, allow_nan=False)))
def test_high_low_high_within_one_ulp(x):
    y = sc.convert_precision(sc.convert_precision(x, LOW), HIGH)
    ulp = np.spacing(np.abs(x).astype(np.float32)).astype(np.float64)
    assert np.all(np.abs(y - x) <= ulp)


# ---------------------------------------------------------------- Matrix Market

def _write(tmp_path, text, name="a.mtx"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_mm_diagonal(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n% c\n2 2 2\n1 1 2.0\n2 2 3.0\n")
    np.testing.assert_array_equal(sc.read_matrix_market(p).toarray(), np.diag([2.0, 3.0]))


def test_mm_symmetric_expansion(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 1.0\n2 1 5.0\n")
    a = sc.read_matrix_market(p).toarray()
    assert a[1, 0] == 5 and a[0, 1] == 5 and a[0, 0] == 1


def test_mm_duplicates_against_reference_reader(tmp_path):
    text = ("%%MatrixMarket matrix coordinate real general\n3 3 5\n"
            "1 1 1.0\n1 1 2.0\n2 3 -1.5\n3 1 4.0\n2 3 0.25\n")
    p = _write(tmp_path, text)
    ours = sc.read_matrix_market(p).toarray()
    ref = scipy.sparse.coo_matrix(scipy.io.mmread(str(p))).toarray()
    np.testing.assert_array_equal(ours, ref)
    assert ours[0, 0] == 3.0


@pytest.mark.parametrize("text,line", [
    ("%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n4\n", 1),
    ("%%MatrixMarket matrix coordinate pattern general\n2 2 1\n1 1\n", 1),
    ("%%MatrixMarket matrix coordinate complex general\n2 2 1\n1 1 1 0\n", 1),
    ("%%MatrixMarket matrix coordinate real skew-symmetric\n2 2 1\n2 1 1\n", 1),
    ("not a header\n2 2 1\n1 1 1\n", 1),
    ("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n", 3),
    ("%%MatrixMarket matrix coordinate real general\n% x\n2 2 2\n1 1 1.0\n1 0 1.0\n", 5),
    ("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 abc\n", 3),
    ("%%MatrixMarket matrix coordinate real general\n2 2\n", 2),
])
def test_mm_errors_carry_line_numbers(tmp_path, text, line):
    with pytest.raises(MatrixMarketError) as info:
        sc.read_matrix_market(_write(tmp_path, text))
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_mm_entry_count_mismatch(tmp_path):
    p = _write(tmp_path, "%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 1.0\n")
    with pytest.raises(MatrixMarketError):
        sc.read_matrix_market(p)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 12), density=st.floats(0.1, 1.0), seed=st.integers(0, 2**31))
def test_mm_write_read_idempotent(tmp_path_factory, n, density, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((n, n)) * (r.random((n, n)) < density)
    A = CsrMatrix.from_dense(a)
    p = tmp_path_factory.mktemp("mm") / "x.mtx"
    sc.write_matrix_market(A, p)
    B = sc.read_matrix_market(p)
    sc.write_matrix_market(B, p)
    C = sc.read_matrix_market(p)
    for M in (B, C):
        np.testing.assert_array_equal(M.row_ptr, A.row_ptr)
        np.testing.assert_array_equal(M.col_idx, A.col_idx)
        np.testing.assert_array_equal(M.values, A.values)


# ---------------------------------------------------------------- generator

def test_convdiff_poisson_k2():
    a = sc.gen_convdiff2d(2, 0.0).toarray()
    ref = np.array([[4, -1, -1, 0], [-1, 4, 0, -1], [-1, 0, 4, -1], [0, -1, -1, 4]], dtype=float)
    np.testing.assert_array_equal(a, ref)


def test_convdiff_nonsymmetric_and_dominant():
    A = sc.gen_convdiff2d(10, 1.0)
    a = A.toarray()
    assert A.shape == (100, 100)
    assert not np.allclose(a, a.T)
    off = np.abs(a).sum(axis=1) - np.abs(np.diag(a))
    assert np.all(np.diag(a) >= off - 1e-12)
    assert np.isfinite(np.linalg.cond(a))


def test_convdiff_small_k_rejected():
    with pytest.raises(ValueError):
        sc.gen_convdiff2d(1, 0.0)


# ---------------------------------------------------------------- backward error

def test_backward_error_exact_solution(rng):
    A, a = random_sparse(12, 0.4, rng)
    x = rng.random(12)
    b = a @ x
    assert sc.backward_error(A, x, b) <= 1e-15


def test_backward_error_zero_x():
    A = CsrMatrix.from_dense(np.diag([2.0, 4.0]))
    assert sc.backward_error(A, np.zeros(2), np.array([2.0, 4.0])) == 1.0
    assert sc.backward_error(A, np.zeros(2), np.array([2.0, 4.0]), norm="fro") == 1.0


def test_backward_error_diag_oracle():
    A = CsrMatrix.from_dense(np.diag([2.0, 4.0]))
    x, b = np.array([1.1, 1.0]), np.array([2.0, 4.0])
    # r = [-0.2, 0]
    inf_ref = 0.2 / (4.0 * 1.1 + 4.0)
    fro_ref = 0.2 / (np.sqrt(20.0) * np.sqrt(1.1**2 + 1.0) + np.sqrt(20.0))
    assert sc.backward_error(A, x, b, "inf") == pytest.approx(inf_ref, rel=1e-14)
    assert sc.backward_error(A, x, b, "fro") == pytest.approx(fro_ref, rel=1e-14)


def test_backward_error_zero_denominator():
    A = CsrMatrix.from_dense(np.zeros((2, 2)))
    with pytest.raises(ZeroDivisionError):
        sc.backward_error(A, np.zeros(2), np.zeros(2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(1e-3, 1e3), norm=st.sampled_from(["inf", "fro"]))
def test_backward_error_scale_invariant(seed, c, norm):
    r = np.random.default_rng(seed)
    A, a = random_sparse(8, 0.5, r)
    x, b = r.standard_normal(8), r.standard_normal(8)
    cA = A.with_values(A.values * c)
    e1 = sc.backward_error(A, x, b, norm)
    e2 = sc.backward_error(cA, x, b * c, norm)
    assert e2 == pytest.approx(e1, rel=1e-12)


# ---------------------------------------------------------------- memory model

def test_estimate_bytes_examples():
    assert sc.estimate_bytes(1000, 5000, 10, "double") == 228_800
    assert sc.estimate_bytes(1000, 5000, 10, "mixed") == 192_400


def test_estimate_bytes_bad_mode():
    with pytest.raises(ValueError):
        sc.estimate_bytes(10, 10, 2, "half")


@given(n=st.integers(1, 10**7), nnz=st.integers(0, 10**8), m=st.integers(1, 2000))
def test_estimate_bytes_mixed_below_double(n, nnz, m):
    d = sc.estimate_bytes(n, nnz, m, "double")
    mx = sc.estimate_bytes(n, nnz, m, "mixed")
    assert isinstance(d, int) and isinstance(mx, int)
    assert mx < d
