import io
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from koopman_microgrid.koopman import reference_predictor
from koopman_microgrid.numerics import (
    NumericsError,
    RiccatiError,
    care_backward_error,
    care_residual,
    eigenvalues,
    format_decimal,
    least_squares,
    pseudo_inverse,
    read_matrix_csv,
    solve_care,
    solve_lyapunov,
    write_matrix_csv,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def well_conditioned(rng, rows, cols, cond=1e3):
    u, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    k = min(rows, cols)
    s = np.geomspace(1.0, 1.0 / cond, k)
    m = np.zeros((rows, cols))
    m[:k, :k] = np.diag(s)
    return u @ m @ v.T


# ---------------------------------------------------------------- pseudo-inverse


def test_pinv_identity():
    assert np.array_equal(pseudo_inverse(np.eye(3)), np.eye(3))


def test_pinv_singular_diagonal():
    np.testing.assert_allclose(pseudo_inverse(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=0)


def test_pinv_left_inverse_of_tall_full_rank(rng):
    m = rng.standard_normal((6, 4))
    assert np.max(np.abs(pseudo_inverse(m) @ m - np.eye(4))) < 1e-9


def test_pinv_matches_lapack(rng):
    m = rng.standard_normal((5, 3))
    np.testing.assert_allclose(pseudo_inverse(m), np.linalg.pinv(m), atol=1e-12)


@pytest.mark.parametrize("bad", [np.array([[np.nan, 1.0]]), np.array([[np.inf]]), np.zeros((0, 3))])
def test_pinv_rejects_bad_input(bad):
    with pytest.raises(NumericsError):
        pseudo_inverse(bad)


def test_pinv_rejects_negative_tolerance():
    with pytest.raises(NumericsError):
        pseudo_inverse(np.eye(2), -1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**31 - 1))
def test_penrose_identities(rows, cols, seed):
    m = well_conditioned(np.random.default_rng(seed), rows, cols, cond=1e5)
    p = pseudo_inverse(m)
    tol = 1e-10 * np.linalg.norm(p, 2) ** 2
    assert np.max(np.abs(m @ p @ m - m)) < tol
    assert np.max(np.abs(p @ m @ p - p)) < tol * np.linalg.norm(p, 2)
    assert np.max(np.abs((m @ p).T - m @ p)) < tol
    assert np.max(np.abs((p @ m).T - p @ m)) < tol


# ---------------------------------------------------------------- least squares


def test_least_squares_identity():
    np.testing.assert_allclose(least_squares(np.eye(2), [[3.0], [4.0]]), [[3.0], [4.0]])


def test_least_squares_mean_of_overdetermined_scalar():
    np.testing.assert_allclose(least_squares([[1.0], [1.0]], [[1.0], [3.0]]), [[2.0]])


def test_least_squares_recovers_consistent_system(rng):
    a = rng.standard_normal((8, 3))
    x0 = rng.standard_normal((3, 2))
    assert np.max(np.abs(least_squares(a, a @ x0) - x0)) < 1e-9


def test_least_squares_minimum_norm_when_rank_deficient():
    a = np.array([[1.0, 1.0], [2.0, 2.0]])
    x = least_squares(a, [[2.0], [4.0]])
    np.testing.assert_allclose(x, [[1.0], [1.0]], atol=1e-12)


def test_least_squares_dimension_mismatch():
    with pytest.raises(NumericsError):
        least_squares(np.eye(3), np.ones((2, 1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_least_squares_residual_orthogonal(rows, cols, seed):
    rng = np.random.default_rng(seed)
    a = well_conditioned(rng, rows, min(cols, rows))
    b = rng.standard_normal((rows, 2))
    x = least_squares(a, b)
    assert np.linalg.norm(a.T @ (a @ x - b)) < 1e-8


# ---------------------------------------------------------------- eigenvalues


def test_eigenvalues_diagonal():
    ev = eigenvalues(np.diag([0.5, 0.9]))
    np.testing.assert_allclose(ev.values, [0.9, 0.5])


def test_eigenvalues_rotation():
    ev = eigenvalues(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    np.testing.assert_allclose(sorted(ev.values, key=lambda z: z.imag), [-1j, 1j], atol=1e-12)


def test_eigenvalues_sorted_by_magnitude_then_real_part():
    ev = eigenvalues(np.diag([-2.0, 0.1, 2.0, -0.5]))
    np.testing.assert_allclose(ev.values, [2.0, -2.0, -0.5, 0.1])


def test_eigenvalues_vectors_satisfy_definition(rng):
    m = rng.standard_normal((4, 4))
    ev = eigenvalues(m, vectors=True)
    for lam, vec in zip(ev.values, ev.vectors.T):
        assert np.linalg.norm(m @ vec - lam * vec) < 1e-9


def test_eigenvalues_reference_matrix_has_zero_and_unit_modes():
    ev = eigenvalues(reference_predictor().a)
    assert np.min(np.abs(ev.values - 1.0)) < 1e-3
    assert np.min(np.abs(ev.values)) < 1e-2


def test_eigenvalues_reject_non_square():
    with pytest.raises(NumericsError):
        eigenvalues(np.ones((2, 3)))


def test_eigenvalues_reject_oversized():
    with pytest.raises(NumericsError):
        eigenvalues(np.eye(17))


@settings(max_examples=80, deadline=None)
@given(arrays(float, (4, 4), elements=finite))
def test_eigenvalue_trace_and_determinant(m):
    ev = eigenvalues(m).values
    scale = max(1.0, np.max(np.abs(m)))
    assert abs(np.sum(ev) - np.trace(m)) < 1e-8 * scale * 4
    assert abs(np.prod(ev) - np.linalg.det(m)) < 1e-8 * scale**4 * 16


# ---------------------------------------------------------------- Lyapunov and Riccati


def test_lyapunov_matches_kronecker_oracle(rng):
    a = rng.standard_normal((4, 4)) - 4 * np.eye(4)
    q = rng.standard_normal((4, 4))
    q = q + q.T
    # vec(A'X + XA) = (I kron A' + A' kron I) vec(X), column-major
    op = np.kron(np.eye(4), a.T) + np.kron(a.T, np.eye(4))
    ref = np.linalg.solve(op, -q.reshape(-1, order="F")).reshape(4, 4, order="F")
    np.testing.assert_allclose(solve_lyapunov(a, q), ref, atol=1e-12)


def test_lyapunov_singular_operator():
    with pytest.raises(NumericsError):
        solve_lyapunov(np.diag([1.0, -1.0]), np.eye(2))


def test_care_scalar_closed_form():
    p = solve_care([[-1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert p[0, 0] == pytest.approx(math.sqrt(2) - 1, abs=1e-12)


def test_care_zero_laplacian_is_standard_care(rng):
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 1))
    q, r = np.eye(3), np.array([[2.0]])
    p = solve_care(a, b, q, r, np.zeros((3, 3)))
    np.testing.assert_allclose(p, scipy.linalg.solve_continuous_are(a, b, q, r), atol=1e-8)
    assert np.linalg.norm(care_residual(a, b, q, r, p)) < 1e-8


def test_care_with_laplacian_uses_shifted_drift(rng):
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 2))
    lap = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
    q, r = np.eye(3), np.eye(2)
    p = solve_care(a, b, q, r, lap)
    np.testing.assert_allclose(p, scipy.linalg.solve_continuous_are(a + lap, b, q, r), atol=1e-8)
    assert np.linalg.norm(care_residual(a, b, q, r, p, lap)) < 1e-6
    assert np.linalg.norm(p - p.T) < 1e-10
    assert eigenvalues(p).values.real.min() > 0


def test_care_zero_state_weight_on_stable_drift():
    p = solve_care([[-1.0]], [[1.0]], [[0.0]], [[1.0]])
    assert abs(p[0, 0]) < 1e-12


def test_care_unstabilizable_pair_raises():
    a = np.diag([1.0, -1.0])
    b = np.array([[0.0], [1.0]])
    with pytest.raises(RiccatiError):
        solve_care(a, b, np.eye(2), np.eye(1))


def test_care_rejects_indefinite_r():
    with pytest.raises(NumericsError):
        solve_care([[-1.0]], [[1.0]], [[1.0]], [[-1.0]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_care_residual_and_symmetry(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    b = rng.standard_normal((n, m))
    q = np.eye(n)
    r = np.eye(m)
    p = solve_care(a, b, q, r)
    assert np.linalg.norm(p - p.T) <= 1e-12 * np.linalg.norm(p)
    # random pairs can be nearly unstabilizable (|P| ~ 1e7), so judge the residual by scale
    assert care_backward_error(a, b, q, r, p) < 1e-10
    assert np.linalg.eigvals(a - b @ np.linalg.solve(r, b.T @ p)).real.max() < 0


# ---------------------------------------------------------------- CSV


def test_csv_round_trip_is_exact(rng):
    m = rng.standard_normal((3, 4))
    back = read_matrix_csv(io.StringIO(write_matrix_csv(m)))
    assert np.array_equal(back, m)


def test_csv_is_positional_decimal():
    text = write_matrix_csv([[1e-7, 2.5e6]])
    assert "e" not in text.lower()
    assert text == "0.0000001,2500000\n"
    assert format_decimal(-0.5) == "-0.5"


def test_csv_rejects_ragged_rows():
    with pytest.raises(NumericsError):
        read_matrix_csv(io.StringIO("1,2\n3\n"))


def test_csv_file_round_trip(tmp_path):
    path = tmp_path / "m.csv"
    write_matrix_csv(np.eye(2), path)
    assert np.array_equal(read_matrix_csv(path), np.eye(2))


def test_care_stalled_iteration_accepted_by_backward_error():
    # nearly unstabilizable: Newton steps hit a round-off floor far above tol * |P|
    rng = np.random.default_rng(230582)
    a = rng.standard_normal((4, 4))
    b = rng.standard_normal((4, 1))
    p = solve_care(a, b, np.eye(4), np.eye(1))
    ref = scipy.linalg.solve_continuous_are(a, b, np.eye(4), np.eye(1))
    assert np.linalg.norm(p - ref) <= 1e-6 * np.linalg.norm(ref)
    assert care_backward_error(a, b, np.eye(4), np.eye(1), p) < 1e-12
