import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irlqg.matrixkit import (
    NotPSDError,
    as_matrix,
    congruence_diag,
    numerical_rank,
    pinv,
    range_included,
    rank_factorize_complement,
)


def test_pinv_identity():
    assert np.array_equal(pinv(np.eye(3)), np.eye(3))


def test_pinv_zero():
    assert np.array_equal(pinv(np.zeros((2, 2))), np.zeros((2, 2)))


def test_pinv_diagonal():
    np.testing.assert_allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-15)


def test_pinv_truncates_tiny_singular_values():
    M = np.diag([1.0, 1e-13])
    np.testing.assert_allclose(pinv(M), np.diag([1.0, 0.0]))
    np.testing.assert_allclose(pinv(M, tol=1e-14), np.diag([1.0, 1e13]))


def test_as_matrix_rejects_non_finite():
    with pytest.raises(ValueError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ValueError):
        as_matrix([[np.inf]])


def test_range_included_examples():
    rng = np.random.default_rng(0)
    assert range_included(rng.standard_normal((3, 2)), np.eye(3) + np.ones((3, 3)))
    assert not range_included(np.array([[1.0]]), np.array([[0.0]]))
    assert range_included(np.zeros((1, 1)), np.zeros((1, 1)))


def test_factorize_zero_weight():
    f = rank_factorize_complement(np.array([[0.0]]))
    assert f.m0 == 0
    np.testing.assert_array_equal(f.T0, [[1.0]])
    np.testing.assert_array_equal(f.Upsilon, [[1.0]])
    np.testing.assert_array_equal(f.G0, [[1.0]])


def test_factorize_full_rank_weight():
    f = rank_factorize_complement(np.eye(3))
    assert f.m0 == 3
    assert f.Upsilon.shape == (0, 3)
    assert f.G0.shape == (3, 0)


def test_factorize_diag_one_zero():
    f = rank_factorize_complement(np.diag([1.0, 0.0]))
    assert f.m0 == 1
    # Upsilon = [0 c] with c != 0; the top row of T0 (I - R^+R) vanishes.
    assert abs(f.Upsilon[0, 0]) < 1e-14 and abs(abs(f.Upsilon[0, 1]) - 1.0) < 1e-14
    np.testing.assert_allclose((f.T0 @ np.diag([0.0, 1.0]))[0], 0.0, atol=1e-14)
    np.testing.assert_allclose(np.abs(f.G0[:, 0]), [0.0, 1.0], atol=1e-14)


def test_factorize_rejects_indefinite():
    with pytest.raises(NotPSDError):
        rank_factorize_complement(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_congruence_scalar_negative():
    d = congruence_diag(np.array([[-1.0]]))
    assert d.r == 1
    np.testing.assert_array_equal(np.abs(d.T1cal), [[1.0]])
    np.testing.assert_allclose(d.Phat_block, [[-1.0]])


def test_congruence_zero():
    d = congruence_diag(np.zeros((3, 3)))
    assert d.r == 0
    np.testing.assert_array_equal(d.T1cal, np.eye(3))


def test_congruence_already_block_diagonal():
    d = congruence_diag(np.diag([2.0, 0.0]))
    assert d.r == 1
    np.testing.assert_allclose(np.abs(d.T1cal), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(d.Phat_block, [[2.0]])


# ---- randomized properties ------------------------------------------------

dims = st.integers(min_value=1, max_value=8)
seeds = st.integers(min_value=0, max_value=2**32 - 1)


def low_rank(rng, r, c, k):
    return rng.standard_normal((r, k)) @ rng.standard_normal((k, c))


@settings(max_examples=100, deadline=None)
@given(r=dims, c=dims, seed=seeds, data=st.data())
def test_penrose_identities(r, c, seed, data):
    k = data.draw(st.integers(0, min(r, c)))
    rng = np.random.default_rng(seed)
    M = low_rank(rng, r, c, k) * 10.0 ** rng.uniform(-3, 3)
    X = pinv(M)
    tol = 1e-8 * (1 + np.linalg.norm(M, 2))
    tolx = 1e-8 * (1 + np.linalg.norm(X, 2))
    assert np.linalg.norm(M @ X @ M - M, 2) <= tol * max(1.0, np.linalg.norm(M, 2))
    assert np.linalg.norm(X @ M @ X - X, 2) <= tolx * max(1.0, np.linalg.norm(X, 2))
    assert np.linalg.norm(M @ X - (M @ X).T, 2) <= 1e-8
    assert np.linalg.norm(X @ M - (X @ M).T, 2) <= 1e-8


@settings(max_examples=100, deadline=None)
@given(m=dims, seed=seeds, data=st.data())
def test_factorization_reconstructs_projector(m, seed, data):
    k = data.draw(st.integers(0, m))
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((m, k))
    R = F @ F.T
    f = rank_factorize_complement(R)
    Nproj = np.eye(m) - pinv(R) @ R
    assert f.m0 == k
    assert f.Upsilon.shape == (m - k, m)
    assert f.G0.shape == (m, m - k)
    stacked = np.vstack([np.zeros((k, m)), f.Upsilon])
    np.testing.assert_allclose(f.T0_inv @ stacked, Nproj, atol=1e-8)
    np.testing.assert_allclose(f.T0 @ f.T0_inv, np.eye(m), atol=1e-10)
    if m > k:
        assert numerical_rank(f.Upsilon) == m - k
        np.testing.assert_allclose(f.G0, f.T0_inv[:, k:])


@settings(max_examples=100, deadline=None)
@given(rows=dims, cx=dims, cy=dims, seed=seeds, inside=st.booleans(), data=st.data())
def test_range_included_matches_lstsq(rows, cx, cy, seed, inside, data):
    k = data.draw(st.integers(0, min(rows, cy)))
    rng = np.random.default_rng(seed)
    Y = low_rank(rng, rows, cy, k)
    if inside:
        X = Y @ rng.standard_normal((cy, cx))
    else:
        X = rng.standard_normal((rows, cx))
    # Oracle: least-squares residual of Y Z = X, with rank judged by singular values.
    Z, *_ = np.linalg.lstsq(Y, X, rcond=1e-10)
    resid = np.linalg.norm(Y @ Z - X, 2)
    expected = resid <= 1e-8 * (1 + np.linalg.norm(X, 2))
    assert range_included(X, Y) == expected


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 8), seed=seeds, data=st.data())
def test_congruence_block_structure(n, seed, data):
    k = data.draw(st.integers(0, n))
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, k))
    signs = rng.choice([-1.0, 1.0], size=k)
    P1 = (F * signs) @ F.T
    d = congruence_diag(P1)
    sv = np.linalg.svd(P1, compute_uv=False)
    expected_rank = int(np.sum(sv > 1e-10 * sv.max())) if sv.max() > 0 else 0
    assert d.r == expected_rank
    target = np.zeros((n, n))
    target[: d.r, : d.r] = d.Phat_block
    assert np.linalg.norm(d.T1cal.T @ P1 @ d.T1cal - target, 2) <= 1e-8 * (1 + np.linalg.norm(P1, 2))
    np.testing.assert_allclose(d.T1cal.T @ d.T1cal, np.eye(n), atol=1e-10)
    if d.r:
        assert numerical_rank(d.Phat_block) == d.r
