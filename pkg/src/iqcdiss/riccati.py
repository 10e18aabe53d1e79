"""Stabilizing Riccati solutions and the canonical factorizations they certify.

Both equations are solved through the stable invariant subspace of a
Hamiltonian-type matrix, taken from an ordered real Schur form. The symmetric
equation is

    A'Z + ZA + C'MC - (ZB + C'MD)(D'MD)^{-1}(B'Z + D'MC) = 0

for a filter ``(A, B, C, D)`` and a symmetric middle matrix ``M``. The
non-symmetric one couples two filters through a rectangular ``P``:

    A1'K + KA2 + C1'PC2 - (KB2 + C1'PD2)(D1'PD2)^{-1}(B1'K + D1'PC2) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .statespace import TOL_SPECTRAL, Realization, freq_response, is_hurwitz

COND_SUBSPACE = 1e10
COND_FEEDTHROUGH = 1e12
TOL_RESIDUAL = 1e-8


class RiccatiError(ValueError):
    """No stabilizing solution could be computed reliably."""


@dataclass(frozen=True)
class CanonicalFactorization:
    psi_tilde: Realization
    m_tilde: np.ndarray
    z_tilde: np.ndarray


@dataclass(frozen=True)
class StructuredTerminalCost:
    k: np.ndarray
    z: np.ndarray


def _check_invertible(n, what):
    if n.size and np.linalg.cond(n) > COND_FEEDTHROUGH:
        raise RiccatiError(f"{what} is singular (cond {np.linalg.cond(n):.3g})")


def _graph_subspace(H, k, what):
    """``U2 U1^{-1}`` from the ``k``-dimensional stable invariant subspace of ``H``."""
    eig = np.linalg.eigvals(H)
    close = np.abs(eig.real) <= TOL_SPECTRAL
    if close.any():
        raise RiccatiError(f"{what}: eigenvalue {eig[close][0]:.3g} on the imaginary axis")
    _, U, sdim = sla.schur(H, output="real", sort="lhp")
    if sdim != k:
        raise RiccatiError(f"{what}: stable subspace has dimension {sdim}, expected {k}")
    U1, U2 = U[:k, :k], U[k:, :k]
    cond = np.linalg.cond(U1)
    if cond > COND_SUBSPACE:
        raise RiccatiError(f"{what}: subspace basis ill-conditioned (cond {cond:.3g})")
    return np.linalg.solve(U1.T, U2.T).T


# --------------------------------------------------------------------------
# symmetric equation


def sym_are_terms(psi: Realization, m):
    a, b, c, d = psi.abcd
    m = np.asarray(m, dtype=float)
    mt = d.T @ m @ d
    s = c.T @ m @ d
    return mt, s, c.T @ m @ c


def sym_are_residual(psi: Realization, m, z) -> tuple:
    """``(norm of the equation residual, scale)``; the scale is ``1 + |A'Z| + |C'MC|``."""
    a, b, c, d = psi.abcd
    mt, s, q = sym_are_terms(psi, m)
    z = np.asarray(z, dtype=float)
    if psi.n == 0:
        return 0.0, 1.0
    gain = z @ b + s
    res = a.T @ z + z @ a + q - gain @ np.linalg.solve(mt, gain.T)
    scale = 1.0 + np.linalg.norm(a.T @ z, 2) + np.linalg.norm(q, 2)
    return float(np.linalg.norm(res, 2)), float(scale)


def sym_are_closed_loop(psi: Realization, m, z) -> np.ndarray:
    a, b, c, d = psi.abcd
    mt, s, _ = sym_are_terms(psi, m)
    return a - b @ np.linalg.solve(mt, b.T @ z + s.T)


def solve_sym_are(psi: Realization, m) -> np.ndarray:
    """Stabilizing solution of the symmetric equation (``0 x 0`` for static ``psi``)."""
    m = np.asarray(m, dtype=float)
    if m.shape != (psi.p, psi.p) or np.abs(m - m.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(m).max()):
        raise ValueError("m must be symmetric and match the filter output")
    mt, s, q = sym_are_terms(psi, m)
    _check_invertible(mt, "D'MD")
    n = psi.n
    if n == 0:
        return np.zeros((0, 0))
    if not psi.is_stable():
        raise RiccatiError("filter state matrix is not Hurwitz")
    a, b = psi.a, psi.b
    ab = a - b @ np.linalg.solve(mt, s.T)
    g = b @ np.linalg.solve(mt, b.T)
    qb = q - s @ np.linalg.solve(mt, s.T)
    H = np.block([[ab, -g], [-qb, -ab.T]])
    z = _refine(_graph_subspace(H, n, "symmetric ARE"), psi, psi, m)
    z = 0.5 * (z + z.T)
    res, scale = sym_are_residual(psi, m, z)
    if res > TOL_RESIDUAL * scale:
        raise RiccatiError(f"symmetric ARE residual {res:.3g} exceeds tolerance (scale {scale:.3g})")
    if not is_hurwitz(sym_are_closed_loop(psi, m, z)):
        raise RiccatiError("symmetric ARE solution is not stabilizing")
    return z


def canonical_factor(psi: Realization, m, z) -> CanonicalFactorization:
    """``Psi~ = (A, B, M~^{-1}(B'Z + D'MC), I)`` with ``M~ = D'MD``."""
    a, b, c, d = psi.abcd
    m = np.asarray(m, dtype=float)
    z = np.asarray(z, dtype=float).reshape(psi.n, psi.n)
    mt = d.T @ m @ d
    _check_invertible(mt, "D'MD")
    ct = np.linalg.solve(mt, b.T @ z + d.T @ m @ c)
    fac = CanonicalFactorization(Realization(a, b, ct, np.eye(psi.m)), 0.5 * (mt + mt.T), z)
    if not is_hurwitz(a - b @ ct):
        raise RiccatiError("factor inverse is not stable: Z is not the stabilizing solution")
    return fac


def factorization_identity_residual(psi: Realization, m, fac: CanonicalFactorization) -> float:
    """Relative mismatch of the state-space identity certifying the factorization."""
    a, b, c, d = psi.abcd
    m = np.asarray(m, dtype=float)
    n = psi.n
    z = fac.z_tilde
    lhs_mid = np.zeros((2 * n + psi.p, 2 * n + psi.p))
    lhs_mid[:n, n:2 * n] = z
    lhs_mid[n:2 * n, :n] = z
    lhs_mid[2 * n:, 2 * n:] = m
    outer = np.vstack([np.hstack([np.eye(n), np.zeros((n, psi.m))]),
                       np.hstack([a, b]), np.hstack([c, d])])
    lhs = outer.T @ lhs_mid @ outer
    cd = np.hstack([fac.psi_tilde.c, fac.psi_tilde.d])
    rhs = cd.T @ fac.m_tilde @ cd
    return float(np.linalg.norm(lhs - rhs, 2) / (1.0 + np.linalg.norm(lhs, 2)))


def verify_factorization(psi: Realization, m, fac: CanonicalFactorization, grid) -> float:
    """Largest relative deviation of ``Psi* M Psi`` from ``Psi~* M~ Psi~`` over ``grid``."""
    m = np.asarray(m, dtype=float)
    worst = 0.0
    for w in np.asarray(grid, dtype=float):
        f = freq_response(psi, w)
        ft = freq_response(fac.psi_tilde, w)
        lhs = f.conj().T @ m @ f
        rhs = ft.conj().T @ fac.m_tilde @ ft
        worst = max(worst, float(np.linalg.norm(lhs - rhs, 2) / (1.0 + np.linalg.norm(lhs, 2))))
    return worst


# --------------------------------------------------------------------------
# non-symmetric equation


def _nonsym_terms(psi1: Realization, psi2: Realization, p):
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if p.shape != (psi1.p, psi2.p):
        raise ValueError(f"p must be {psi1.p}x{psi2.p}, got {p.shape}")
    n = psi1.d.T @ p @ psi2.d
    s1 = psi1.c.T @ p @ psi2.d
    s2 = psi1.d.T @ p @ psi2.c
    q = psi1.c.T @ p @ psi2.c
    return p, n, s1, s2, q


def nonsym_are_residual(psi1: Realization, psi2: Realization, p, k) -> tuple:
    p, n, s1, s2, q = _nonsym_terms(psi1, psi2, p)
    k = np.asarray(k, dtype=float).reshape(psi1.n, psi2.n)
    if k.size == 0:
        return 0.0, 1.0
    res = _residual_matrix(psi1, psi2, p, k)
    scale = 1.0 + np.linalg.norm(psi1.a.T @ k, 2) + np.linalg.norm(q, 2)
    return float(np.linalg.norm(res, 2)), float(scale)


def nonsym_are_spectra(psi1: Realization, psi2: Realization, p, k) -> tuple:
    """Eigenvalues of the two closed loops that must lie in the open left half-plane."""
    k = np.asarray(k, dtype=float).reshape(psi1.n, psi2.n)
    left, right = _closed_loops(psi1, psi2, p, k)
    return np.linalg.eigvals(left), np.linalg.eigvals(right)


def _residual_matrix(psi1, psi2, p, k):
    p, n, s1, s2, q = _nonsym_terms(psi1, psi2, p)
    return (psi1.a.T @ k + k @ psi2.a + q
            - (k @ psi2.b + s1) @ np.linalg.solve(n, psi1.b.T @ k + s2))


def _refine(k, psi1, psi2, p, steps: int = 3):
    """Newton steps on the equation (one Sylvester solve each); keeps the best iterate."""
    best = k
    best_res = np.linalg.norm(_residual_matrix(psi1, psi2, p, k), 2)
    for _ in range(steps):
        if best_res == 0.0:
            break
        left, right = _closed_loops(psi1, psi2, p, best)
        try:
            dk = sla.solve_sylvester(left, right, -_residual_matrix(psi1, psi2, p, best))
        except (np.linalg.LinAlgError, ValueError):
            break
        cand = best + dk
        res = np.linalg.norm(_residual_matrix(psi1, psi2, p, cand), 2)
        if not res < best_res:
            break
        best, best_res = cand, res
    return best


def _closed_loops(psi1, psi2, p, k):
    p, n, s1, s2, q = _nonsym_terms(psi1, psi2, p)
    left = psi1.a.T - (k @ psi2.b + s1) @ np.linalg.solve(n, psi1.b.T)
    right = psi2.a - psi2.b @ np.linalg.solve(n, psi1.b.T @ k + s2)
    return left, right


def solve_nonsym_are(psi1: Realization, psi2: Realization, p) -> np.ndarray:
    """Stabilizing ``K`` (``n1 x n2``) of the non-symmetric equation."""
    p, n, s1, s2, q = _nonsym_terms(psi1, psi2, p)
    _check_invertible(n, "D1'PD2")
    n1, n2 = psi1.n, psi2.n
    if n1 != n2:
        raise ValueError("both filters need the same state dimension")
    if n1 == 0:
        return np.zeros((0, 0))
    if not (psi1.is_stable() and psi2.is_stable()):
        raise RiccatiError("filter state matrices must be Hurwitz")
    f1 = psi1.a.T - s1 @ np.linalg.solve(n, psi1.b.T)
    f2 = psi2.a - psi2.b @ np.linalg.solve(n, s2)
    qh = q - s1 @ np.linalg.solve(n, s2)
    g = psi2.b @ np.linalg.solve(n, psi1.b.T)
    H = np.block([[f2, -g], [-qh, -f1]])
    k = _refine(_graph_subspace(H, n2, "non-symmetric ARE"), psi1, psi2, p)
    res, scale = nonsym_are_residual(psi1, psi2, p, k)
    if res > TOL_RESIDUAL * scale:
        raise RiccatiError(f"non-symmetric ARE residual {res:.3g} exceeds tolerance (scale {scale:.3g})")
    for spec in nonsym_are_spectra(psi1, psi2, p, k):
        if spec.size and spec.real.max() >= -TOL_SPECTRAL:
            raise RiccatiError("non-symmetric ARE solution is not stabilizing")
    return k


def terminal_cost_from_K(k) -> StructuredTerminalCost:
    k = np.asarray(k, dtype=float)
    if k.size == 0:
        k = np.zeros((0, 0))
    k = np.atleast_2d(k)
    r, c = k.shape
    z = np.block([[np.zeros((r, r)), k], [k.T, np.zeros((c, c))]])
    return StructuredTerminalCost(k, z)
