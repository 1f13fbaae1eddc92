import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from koopnav.lin_core import SVDConvergenceError, kron_cols, kron_vec, lstsq_min_norm, pinv


def test_kron_vec_block_order():
    assert kron_vec([2, 3], [1, 0, 4]).tolist() == [2, 0, 8, 3, 0, 12]


def test_kron_vec_identity_block():
    z = np.array([0.3, -1.2, 7.0])
    np.testing.assert_array_equal(kron_vec([1, 0], z), np.r_[z, 0, 0, 0])


def test_kron_vec_annihilated_by_zero_input():
    assert not np.any(kron_vec([0.0, 0.0], np.random.default_rng(0).normal(size=6)))


def test_kron_vec_matches_numpy_kron():
    rng = np.random.default_rng(1)
    u, z = rng.normal(size=2), rng.normal(size=6)
    np.testing.assert_array_equal(kron_vec(u, z), np.kron(u, z))


def test_kron_cols_is_columnwise_kron_vec():
    rng = np.random.default_rng(2)
    U, Z = rng.normal(size=(2, 7)), rng.normal(size=(6, 7))
    K = kron_cols(U, Z)
    assert K.shape == (12, 7)
    for t in range(7):
        np.testing.assert_array_equal(K[:, t], kron_vec(U[:, t], Z[:, t]))


@given(
    u=arrays(float, 2, elements=st.floats(-100, 100)),
    z=arrays(float, 6, elements=st.floats(-100, 100)),
    a=st.floats(-10, 10),
)
def test_kron_vec_homogeneous_in_u(u, z, a):
    lhs = kron_vec(a * u, z)
    rhs = a * kron_vec(u, z)
    # a*u*z vs a*(u*z): one rounding apart at most
    np.testing.assert_allclose(lhs, rhs, rtol=4 * np.finfo(float).eps, atol=1e-300)


def test_pinv_identity():
    np.testing.assert_array_equal(pinv(np.eye(3)), np.eye(3))


def test_pinv_truncates_zero_singular_value():
    np.testing.assert_allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=0)


def test_pinv_left_inverse_of_full_column_rank():
    M = np.random.default_rng(3).normal(size=(5, 3))
    assert np.max(np.abs(pinv(M) @ M - np.eye(3))) < 1e-10


def test_pinv_agrees_with_numpy_reference():
    M = np.random.default_rng(4).normal(size=(8, 5)) @ np.diag([1, 1, 1, 0, 0]) @ np.random.default_rng(5).normal(size=(5, 6))
    np.testing.assert_allclose(pinv(M), np.linalg.pinv(M, rcond=1e-12), atol=1e-10)


def test_pinv_rejects_nonfinite_and_negative_tol():
    with pytest.raises(ValueError):
        pinv(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        pinv(np.eye(2), tol=-1.0)


def test_svd_error_is_linalg_error():
    err = SVDConvergenceError((3, 4), "did not converge")
    assert isinstance(err, np.linalg.LinAlgError)
    assert "3x4" in str(err) or "(3, 4)" in str(err)


@settings(max_examples=60, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 50), st.integers(1, 50)),
    rank_cut=st.integers(0, 50),
    seed=st.integers(0, 2**32 - 1),
)
def test_penrose_conditions(shape, rank_cut, seed):
    rng = np.random.default_rng(seed)
    M = rng.uniform(-10, 10, size=shape)
    if rank_cut and rank_cut < min(shape):
        # make the matrix rank deficient half of the time
        L = rng.uniform(-10, 10, size=(shape[0], rank_cut))
        R = rng.uniform(-1, 1, size=(rank_cut, shape[1]))
        M = np.clip(L @ R, -10, 10)
    P = pinv(M)
    assert np.max(np.abs(M @ P @ M - M)) < 1e-9
    assert np.max(np.abs(P @ M @ P - P)) < 1e-9
    assert np.max(np.abs((M @ P).T - M @ P)) < 1e-9
    assert np.max(np.abs((P @ M).T - P @ M)) < 1e-9


def test_lstsq_identity_system():
    Y = np.random.default_rng(6).normal(size=(4, 5))
    np.testing.assert_allclose(lstsq_min_norm(np.eye(5), Y), Y, atol=1e-15)


def test_lstsq_recovers_generator():
    rng = np.random.default_rng(7)
    W0 = rng.normal(size=(6, 20))
    A = rng.normal(size=(20, 300))
    assert np.max(np.abs(lstsq_min_norm(A, W0 @ A) - W0)) < 1e-9


def test_lstsq_zero_row_matches_reduced_normal_equations():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(5, 40))
    A[2] = 0.0
    Y = rng.normal(size=(3, 40))
    W = lstsq_min_norm(A, Y)
    Ar = np.delete(A, 2, axis=0)
    Wr = np.linalg.solve(Ar @ Ar.T, Ar @ Y.T).T
    np.testing.assert_allclose(np.delete(W, 2, axis=1), Wr, atol=1e-10)
    assert np.max(np.abs(W[:, 2])) < 1e-14


def test_lstsq_dimension_mismatch():
    with pytest.raises(ValueError):
        lstsq_min_norm(np.ones((3, 4)), np.ones((2, 5)))


def test_lstsq_residual_is_globally_minimal():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(6, 50))
    Y = rng.normal(size=(3, 50))
    W = lstsq_min_norm(A, Y)
    best = np.linalg.norm(Y - W @ A)
    for _ in range(1000):
        d = rng.normal(size=W.shape)
        d *= 1e-3 / np.linalg.norm(d)
        assert np.linalg.norm(Y - (W + d) @ A) >= best - 1e-12
