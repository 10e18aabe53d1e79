import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from iqcdiss import riccati
from iqcdiss.analysis import default_grid
from iqcdiss.lmi import structured_Z
from iqcdiss.statespace import Realization, freq_response, is_hurwitz, multiplier_filter, psi_basis

from conftest import random_stable

SCALAR = Realization([[-1.0]], [[1.0]], [[1.0]], [[1.0]])


def test_scalar_sym_are():
    z = riccati.solve_sym_are(SCALAR, [[1.0]])
    # -z^2 - 4z = 0 has roots 0 and -4; 0 stabilizes (closed loop -2)
    assert abs(z[0, 0]) <= 1e-12
    assert np.allclose(riccati.sym_are_closed_loop(SCALAR, [[1.0]], z), [[-2.0]])
    res, scale = riccati.sym_are_residual(SCALAR, [[1.0]], z)
    assert res <= 1e-8 * scale


def test_scalar_canonical_factor():
    z = riccati.solve_sym_are(SCALAR, [[1.0]])
    fac = riccati.canonical_factor(SCALAR, [[1.0]], z)
    assert np.allclose(fac.psi_tilde.c, [[1.0]]) and np.allclose(fac.m_tilde, [[1.0]])
    for w in np.logspace(-2, 2, 7):
        s = 1j * w
        assert np.isclose(freq_response(fac.psi_tilde, w)[0, 0], (s + 2) / (s + 1))
    assert riccati.verify_factorization(SCALAR, [[1.0]], fac, np.logspace(-3, 3, 100)) <= 1e-10


def test_factorization_sensitivity():
    z = riccati.solve_sym_are(SCALAR, [[1.0]])
    fac = riccati.canonical_factor(SCALAR, [[1.0]], z)
    bad = riccati.CanonicalFactorization(
        Realization(SCALAR.a, SCALAR.b, fac.psi_tilde.c + 1e-2, np.eye(1)), fac.m_tilde, z + 1e-2)
    assert riccati.verify_factorization(SCALAR, [[1.0]], bad, np.logspace(-3, 3, 100)) > 1e-4


def test_static_filter():
    psi = multiplier_filter(0)
    m = structured_Z([[2.0]])
    z = riccati.solve_sym_are(psi, m)
    assert z.shape == (0, 0)
    fac = riccati.canonical_factor(psi, m, z)
    assert np.array_equal(fac.m_tilde, psi.d.T @ m @ psi.d)
    assert riccati.verify_factorization(psi, m, fac, default_grid()) == 0.0


def test_singular_feedthrough():
    psi = multiplier_filter(1)
    with pytest.raises(riccati.RiccatiError):
        riccati.solve_sym_are(psi, np.zeros((4, 4)))
    with pytest.raises(riccati.RiccatiError):
        riccati.solve_nonsym_are(psi_basis(1), psi_basis(1), np.zeros((2, 2)))


def test_axis_eigenvalue_rejected():
    # M = diag(1, -1) on col(1, 1/(s+1)) gives 1 - 1/(w^2+1), zero at w = 0
    psi = psi_basis(1)
    with pytest.raises(riccati.RiccatiError):
        riccati.solve_sym_are(psi, np.diag([1.0, -1.0]))


def _random_instance(rng, n):
    psi = random_stable(rng, n, 2, 2)
    d = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    psi = Realization(psi.a, psi.b, psi.c, d)
    m = np.diag([1.0, 1.0]) + 0.1 * np.diag(rng.uniform(size=2))
    return psi, m


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_random_sym_are(seed, n):
    rng = np.random.default_rng(seed)
    psi, m = _random_instance(rng, n)
    z = riccati.solve_sym_are(psi, m)
    res, scale = riccati.sym_are_residual(psi, m, z)
    assert res <= 1e-8 * scale
    assert is_hurwitz(riccati.sym_are_closed_loop(psi, m, z))
    fac = riccati.canonical_factor(psi, m, z)
    assert riccati.factorization_identity_residual(psi, m, fac) <= 1e-8
    # oracle: scipy's ARE solver has the same form for M > 0
    a, b, c, d = psi.abcd
    zs = sla.solve_continuous_are(a, b, c.T @ m @ c, d.T @ m @ d, s=c.T @ m @ d)
    assert np.allclose(zs, z, atol=1e-7 * (1 + np.abs(z).max()))


def test_scalar_nonsym_are():
    p = np.eye(2)
    k = riccati.solve_nonsym_are(psi_basis(1), psi_basis(1), p)
    # equation: -2k + 1 - k^2 ... with N = 1: roots -1 +- sqrt(2); stabilizing sqrt(2) - 1
    assert np.isclose(k[0, 0], np.sqrt(2) - 1, atol=1e-12)
    res, scale = riccati.nonsym_are_residual(psi_basis(1), psi_basis(1), p, k)
    assert res <= 1e-8 * scale
    for spec in riccati.nonsym_are_spectra(psi_basis(1), psi_basis(1), p, k):
        assert np.all(spec.real < 0)


def test_nonsym_empty():
    assert riccati.solve_nonsym_are(psi_basis(0), psi_basis(0), [[1.0]]).shape == (0, 0)


@pytest.mark.parametrize("nu", [1, 2, 3])
def test_nonsym_matches_structured_sym(nu):
    rng = np.random.default_rng(nu)
    ps = psi_basis(nu)
    p = rng.standard_normal((nu + 1, nu + 1))
    p[0, 0] = 5.0 + abs(p[0, 0])
    k = riccati.solve_nonsym_are(ps, ps, p)
    z = riccati.solve_sym_are(multiplier_filter(nu), structured_Z(p))
    assert np.allclose(z, structured_Z(k), atol=1e-9 * (1 + np.abs(z).max()))
    res, scale = riccati.sym_are_residual(multiplier_filter(nu), structured_Z(p), structured_Z(k))
    assert res <= 1e-8 * scale


def test_nonsym_shape_checks():
    with pytest.raises(ValueError):
        riccati.solve_nonsym_are(psi_basis(1), psi_basis(1), np.eye(3))
    with pytest.raises(ValueError):
        riccati.solve_nonsym_are(psi_basis(1), psi_basis(2), np.ones((2, 3)))


def test_terminal_cost_from_K():
    tc = riccati.terminal_cost_from_K([[1.0]])
    assert np.array_equal(tc.z, [[0.0, 1.0], [1.0, 0.0]])
    assert riccati.terminal_cost_from_K(np.zeros((0, 0))).z.shape == (0, 0)
    k = np.random.default_rng(0).standard_normal((3, 3))
    ev = np.sort(np.linalg.eigvalsh(riccati.terminal_cost_from_K(k).z))
    sv = np.linalg.svd(k, compute_uv=False)
    assert np.allclose(ev, np.sort(np.concatenate([sv, -sv])))


@pytest.mark.parametrize("nu", [1, 2, 3])
def test_example_are_certificates(solved, nu):
    b = solved[nu][0]
    assert b.k_are is not None
    ps = psi_basis(nu)
    res, scale = riccati.nonsym_are_residual(ps, ps, b.p, b.k_are)
    assert res <= 1e-8 * scale
    # the ARE-based terminal cost also satisfies R - Z <= 0 (margin reported, non-strict)
    margin = np.linalg.eigvalsh(b.r - structured_Z(b.k_are)).max()
    assert margin <= 0
