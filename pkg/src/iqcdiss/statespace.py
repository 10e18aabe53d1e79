"""Real state-space realizations and the filters used by the parametric test.

A :class:`Realization` ``(a, b, c, d)`` stands for ``G(s) = c (sI - a)^{-1} b + d``.
Static gains (``n = 0``) are ordinary realizations with empty state blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL_SPECTRAL = 1e-9


@dataclass(frozen=True)
class Realization:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.d, dtype=float))
        p, m = d.shape
        a = np.asarray(self.a, dtype=float)
        n = 0 if a.size == 0 else a.shape[0]
        a = a.reshape(n, n)
        b = np.asarray(self.b, dtype=float).reshape(n, m)
        c = np.asarray(self.c, dtype=float).reshape(p, n)
        for name, arr in zip("abcd", (a, b, c, d)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.d.shape[1]

    @property
    def p(self) -> int:
        return self.d.shape[0]

    @property
    def abcd(self):
        return self.a, self.b, self.c, self.d

    def is_stable(self, tol: float = TOL_SPECTRAL) -> bool:
        return is_hurwitz(self.a, tol)

    def __repr__(self):
        return f"Realization(n={self.n}, m={self.m}, p={self.p})"


def static(d) -> Realization:
    d = np.atleast_2d(np.asarray(d, dtype=float))
    return Realization(np.zeros((0, 0)), np.zeros((0, d.shape[1])), np.zeros((d.shape[0], 0)), d)


@dataclass(frozen=True)
class Interval:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("interval bounds must be finite")
        if self.alpha > self.beta:
            raise ValueError(f"empty interval [{self.alpha}, {self.beta}]")

    def contains(self, delta: float) -> bool:
        return self.alpha <= delta <= self.beta


@dataclass(frozen=True)
class UncertainPlant:
    """Plant ``x' = a x + b_w w + b_d d``, ``z = c_z x + d_zw w + d_zd d``, ``e = c_e x``."""

    a: np.ndarray
    b_w: np.ndarray
    b_d: np.ndarray
    c_z: np.ndarray
    d_zw: np.ndarray
    d_zd: np.ndarray
    c_e: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError(f"a must be square, got {a.shape}")
        b_w = np.asarray(self.b_w, dtype=float).reshape(n, -1)
        b_d = np.asarray(self.b_d, dtype=float).reshape(n, -1)
        c_z = np.asarray(self.c_z, dtype=float).reshape(-1, n)
        c_e = np.asarray(self.c_e, dtype=float).reshape(-1, n)
        nz, nw, nd = c_z.shape[0], b_w.shape[1], b_d.shape[1]
        d_zw = np.asarray(self.d_zw, dtype=float).reshape(nz, nw)
        d_zd = np.asarray(self.d_zd, dtype=float).reshape(nz, nd)
        for name, arr in zip(("a", "b_w", "b_d", "c_z", "d_zw", "d_zd", "c_e"),
                             (a, b_w, b_d, c_z, d_zw, d_zd, c_e)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def n_z(self):
        return self.c_z.shape[0]

    @property
    def n_w(self):
        return self.b_w.shape[1]

    @property
    def n_d(self):
        return self.b_d.shape[1]

    @property
    def n_e(self):
        return self.c_e.shape[0]

    def g(self) -> Realization:
        """The ``w -> z`` channel."""
        return Realization(self.a, self.b_w, self.c_z, self.d_zw)


def is_hurwitz(a, tol: float = TOL_SPECTRAL) -> bool:
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return True
    return bool(np.max(np.linalg.eigvals(a).real) < -tol)


def freq_response(r: Realization, omega: float) -> np.ndarray:
    """Evaluate ``C (i omega I - A)^{-1} B + D``; ``omega = inf`` returns ``D``."""
    if r.n == 0 or np.isinf(omega):
        return r.d.astype(complex)
    lhs = 1j * omega * np.eye(r.n) - r.a
    if np.linalg.cond(lhs) > 1e14:
        raise np.linalg.LinAlgError(f"i*{omega} is (numerically) an eigenvalue of a")
    return r.c @ np.linalg.solve(lhs, r.b.astype(complex)) + r.d


def psi_basis(nu: int) -> Realization:
    """Chain realization of ``col(1, 1/(s+1), ..., 1/(s+1)^nu)``."""
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    a = -np.eye(nu) + np.eye(nu, k=-1)
    b = np.zeros((nu, 1))
    if nu:
        b[0, 0] = 1.0
    c = np.vstack([np.zeros((1, nu)), np.eye(nu)])
    d = np.zeros((nu + 1, 1))
    d[0, 0] = 1.0
    return Realization(a, b, c, d)


def _blkdiag(x, y):
    out = np.zeros((x.shape[0] + y.shape[0], x.shape[1] + y.shape[1]))
    out[: x.shape[0], : x.shape[1]] = x
    out[x.shape[0]:, x.shape[1]:] = y
    return out


def diag_join(r1: Realization, r2: Realization) -> Realization:
    return Realization(*(_blkdiag(x, y) for x, y in zip(r1.abcd, r2.abcd)))


def cascade(outer: Realization, inner: Realization) -> Realization:
    """Series connection ``outer * inner`` with state ``col(x_outer, x_inner)``."""
    if outer.m != inner.p:
        raise ValueError(f"cascade: outer takes {outer.m} inputs, inner gives {inner.p} outputs")
    a = np.block([[outer.a, outer.b @ inner.c],
                  [np.zeros((inner.n, outer.n)), inner.a]])
    b = np.vstack([outer.b @ inner.d, inner.b])
    c = np.hstack([outer.c, outer.d @ inner.c])
    d = outer.d @ inner.d
    return Realization(a, b, c, d)


def inverse_graph(g: Realization) -> Realization:
    """Realization of ``F = [G; I]``."""
    c = np.vstack([g.c, np.zeros((g.m, g.n))])
    d = np.vstack([g.d, np.eye(g.m)])
    return Realization(g.a, g.b, c, d)


def parametric_T(interval: Interval, n: int = 1) -> np.ndarray:
    """``[[I, -I/beta], [-alpha I, I]]`` mapping ``col(z, w)`` to the filter input."""
    if interval.beta == 0:
        raise ValueError("beta must be nonzero")
    eye = np.eye(n)
    return np.block([[eye, -eye / interval.beta], [-interval.alpha * eye, eye]])


def stack_J(n: int = 1) -> np.ndarray:
    return np.vstack([np.eye(n), np.eye(n)])


def stack_E(n_z: int = 1, n_w: int | None = None) -> np.ndarray:
    n_w = n_z if n_w is None else n_w
    return np.vstack([np.eye(n_z), np.zeros((n_w, n_z))])


def multiplier_filter(nu: int) -> Realization:
    """``Psi = diag(psi_1, psi_2)`` with both factors from :func:`psi_basis`."""
    psi = psi_basis(nu)
    return diag_join(psi, psi)


def example_plant() -> UncertainPlant:
    """Four-state plant with a scalar parametric uncertainty and 2-D performance output."""
    a = [[-0.97, 2.2, 2.36, 3.45],
         [-0.21, -0.8, 5.2, -0.35],
         [-2.56, -4.97, -0.75, -9.75],
         [-3.64, 0.2, 9.68, -0.64]]
    b_w = [[-0.62], [-0.7], [-1.42], [0.0]]
    b_d = [[-0.1], [-0.32], [-0.84], [0.0]]
    c_z = [[0.0, -0.36, 0.36, -0.57]]
    c_e = [[1.5, -0.11, 0.0, 0.93], [0.1, 0.0, 0.0, 0.0]]
    return UncertainPlant(a, b_w, b_d, c_z, [[-1.14]], [[-1.76]], c_e)


EXAMPLE_INTERVAL = Interval(-0.6, 5.0)
