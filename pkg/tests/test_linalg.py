import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfpe.linalg import eigh, eigvals, eigvalsh, hessenberg, range_basis, smallest_singular_value, spectral_norm


def _sorted(ev):
    ev = np.asarray(ev, dtype=complex)
    return ev[np.lexsort((ev.imag, ev.real))]


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 16, 33, 64])
def test_general_eigenvalues_match_numpy(n):
    A = np.random.default_rng(n).normal(size=(n, n))
    np.testing.assert_allclose(eigvals(A), _sorted(np.linalg.eigvals(A)), atol=1e-9 * max(1, np.abs(A).max() * n))


def test_known_spectra():
    np.testing.assert_allclose(eigvals([[0, -1], [1, 0]]), [-1j, 1j], atol=1e-14)
    np.testing.assert_allclose(eigvals(np.diag([3.0, -2.0, 1.0])), [-2, 1, 3], atol=1e-14)
    J = np.array([[-0.5, 0.45], [0.45, -0.5]])
    np.testing.assert_allclose(eigvals(J).real, [-0.95, -0.05], atol=1e-14)


def test_hessenberg_is_similar():
    A = np.random.default_rng(0).normal(size=(7, 7))
    H = hessenberg(A)
    assert np.allclose(np.tril(H, -2), 0)
    np.testing.assert_allclose(np.sort_complex(np.linalg.eigvals(H)), np.sort_complex(np.linalg.eigvals(A)),
                               atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_symmetric_eigh(seed, n):
    B = np.random.default_rng(seed).normal(size=(n, n))
    S = B + B.T
    vals, vecs = eigh(S)
    np.testing.assert_allclose(vals, np.linalg.eigvalsh(S), atol=1e-10 * max(1, np.abs(S).max()))
    np.testing.assert_allclose(S @ vecs, vecs * vals, atol=1e-9 * max(1, np.abs(S).max()))
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_spectral_norm_symmetric_equals_max_abs_eigenvalue(seed, n):
    B = np.random.default_rng(seed).normal(size=(n, n))
    S = B + B.T
    assert abs(spectral_norm(S) - np.max(np.abs(eigvalsh(S)))) <= 1e-10 * max(1, np.abs(S).max())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12), m=st.integers(1, 12))
def test_spectral_norm_matches_svd_oracle(seed, n, m):
    A = np.random.default_rng(seed).normal(size=(n, m))
    sv = np.linalg.svd(A, compute_uv=False)  # LAPACK bidiagonalisation
    assert abs(spectral_norm(A) - sv[0]) <= 1e-8
    if n == m:
        assert abs(smallest_singular_value(A) - sv[-1]) <= 1e-6


def test_range_basis_of_rank_deficient():
    B = np.random.default_rng(1).normal(size=(6, 3))
    U, vals = range_basis(B @ B.T)
    assert U.shape == (6, 3) and vals.shape == (3,)
    np.testing.assert_allclose(U @ U.T @ B, B, atol=1e-10)
