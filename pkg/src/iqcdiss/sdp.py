"""Dense primal-dual interior-point solver for small LMI problems.

Problem form: minimize ``c'x`` subject to ``F_j(x) = F_j0 + sum_i x_i F_ji >= 0``.
The method is a Mehrotra predictor-corrector path-following scheme with
Nesterov-Todd scaling, run in two phases:

* phase I maximizes a common eigenvalue shift ``-t`` over ``F_j(x) + t I >= 0``
  (``t >= -1``) from the trivially feasible point ``x = 0``; a nonnegative optimal
  shift means the LMIs are infeasible;
* phase II minimizes ``c'x`` from the strictly feasible phase-I point.

Before solving, directions ``v`` with ``sum_i v_i F_ji = 0`` for every block and
``c'v = 0`` (exact lineality) are projected out, and every variable is kept in a
box ``|x_i| <= bound`` in scaled coordinates. Problems whose optimal face is
unbounded (typical when a realization inside an LMI is not minimal) have no
strictly feasible dual; the box restores one. When its multipliers show that
the box changes the objective, the bound is enlarged and the phase re-run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .lmi import SdpProblem

log = logging.getLogger(__name__)

STEP_FRACTION = 0.98
GAP_TARGET = 1e-2  # aim below the requested gap so reported values clear it comfortably


@dataclass
class SolverOptions:
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    max_iter: int = 200
    bound: float = 1e3
    max_bound_growth: int = 3


@dataclass
class SdpSolution:
    x: np.ndarray
    status: str  # optimal | feasible | infeasible | numerical_failure
    objective: float
    residual: float
    iterations: int
    gap: float = np.nan
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")


def min_eig(sym) -> float:
    sym = np.asarray(sym, dtype=float)
    if sym.size == 0:
        return np.inf
    if np.abs(sym - sym.T).max() > 1e-9 * max(1.0, np.abs(sym).max()):
        raise ValueError("min_eig expects a symmetric matrix")
    return float(sla.eigvalsh(sym, subset_by_index=[0, 0])[0])


def max_eig(sym) -> float:
    return -min_eig(-np.asarray(sym, dtype=float))


# --------------------------------------------------------------------------
# internal standard form


@dataclass
class _Cone:
    """``s = h + G x`` with ``s`` in a product of PSD blocks and an orthant."""

    consts: list  # per block, s_j x s_j
    coeffs: list  # per block, (n, s_j, s_j)
    h: np.ndarray  # orthant part
    G: np.ndarray  # (m_l, n)
    c: np.ndarray

    @property
    def n(self):
        return self.c.shape[0]

    @property
    def degree(self):
        return sum(C.shape[0] for C in self.consts) + self.h.shape[0]

    def slack(self, x):
        S = [C + np.tensordot(x, A, axes=1) for C, A in zip(self.consts, self.coeffs)]
        return S, self.h + self.G @ x

    def adjoint(self, Z, z):
        out = self.G.T @ z
        for A, Zj in zip(self.coeffs, Z):
            out = out + np.einsum("kij,ij->k", A, Zj)
        return out


def _nt_scaling(S, Z):
    """``R`` with ``R^{-1} S R^{-T} = R^T Z R = diag(lam)``."""
    Ls = np.linalg.cholesky(S)
    Lz = np.linalg.cholesky(Z)
    U, lam, Vt = np.linalg.svd(Lz.T @ Ls)
    R = Ls @ Vt.T / np.sqrt(lam)
    Rinv = (np.sqrt(lam)[:, None] * Vt) @ sla.solve_triangular(Ls, np.eye(len(lam)), lower=True)
    return R, Rinv, lam


def _max_step(lam, d):
    """Largest ``a`` with ``diag(lam) + a d >= 0`` (``inf`` if unbounded)."""
    if lam.size == 0:
        return np.inf
    isq = 1.0 / np.sqrt(lam)
    w = sla.eigvalsh(isq[:, None] * d * isq[None, :], subset_by_index=[0, 0])[0]
    return np.inf if w >= 0 else -1.0 / w


def _factor(H):
    reg = 0.0
    scale = max(np.abs(np.diag(H)).max(initial=0.0), 1e-300)
    while True:
        try:
            return sla.cho_factor(H + reg * np.eye(len(H)))
        except np.linalg.LinAlgError:
            reg = scale * 1e-15 if reg == 0.0 else reg * 100.0


def _max_step_lp(v, dv):
    neg = dv < 0
    if not neg.any():
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _pd_solve(cone: _Cone, x, Z, z, opts: SolverOptions, stop=None, label="", obj_scale=1.0):
    """Feasible-primal-start path following. Returns ``(x, Z, z, info)``.

    ``obj_scale`` converts the internal objective back to user units for the
    relative gap test.
    """
    S, s = cone.slack(x)
    nb = len(S)
    deg = cone.degree
    cnorm = 1.0 + np.linalg.norm(cone.c)
    info = {"status": "max_iter", "iterations": 0}
    best_dres = np.inf
    for it in range(1, opts.max_iter + 1):
        info["iterations"] = it
        Sx, sx = cone.slack(x)
        rp = [Si - Sxi for Si, Sxi in zip(S, Sx)]
        rpl = s - sx
        rd = cone.c - cone.adjoint(Z, z)
        gap = sum(float(np.sum(Si * Zi)) for Si, Zi in zip(S, Z)) + float(s @ z)
        pobj = float(cone.c @ x)
        dobj = -sum(float(np.sum(C * Zi)) for C, Zi in zip(cone.consts, Z)) - float(cone.h @ z)
        dres = np.linalg.norm(rd) / cnorm
        info.update(gap=gap, pobj=pobj, dobj=dobj, dres=dres)
        if stop is not None and stop(x):
            info["status"] = "stopped"
            break
        gap_ok = gap * obj_scale <= GAP_TARGET * opts.tol_gap * (1.0 + abs(pobj) * obj_scale)
        if dres <= opts.tol_feas and gap_ok:
            info["status"] = "optimal"
            break
        if gap_ok and dres >= best_dres:
            # complementarity converged, dual residual at its rounding floor
            info["status"] = "dual_stalled"
            break
        best_dres = min(best_dres, dres)
        mu = gap / deg

        try:
            scal = [_nt_scaling(Si, Zi) for Si, Zi in zip(S, Z)]
        except np.linalg.LinAlgError:
            info["status"] = "scaling_breakdown"
            break
        wl = np.sqrt(s / z)
        laml = np.sqrt(s * z)

        Ft = [np.einsum("ij,kjl,ml->kim", Rinv, A, Rinv) for (R, Rinv, lam), A in zip(scal, cone.coeffs)]
        H = cone.G.T @ (cone.G / wl[:, None] ** 2)
        for F in Ft:
            V = F.reshape(F.shape[0], -1)
            H += V @ V.T
        H = 0.5 * (H + H.T)
        rpt = [Rinv @ r @ Rinv.T for (R, Rinv, lam), r in zip(scal, rp)]
        Hfac = _factor(H)

        def hsolve(b):
            dx = sla.cho_solve(Hfac, b)
            for _ in range(2):
                dx = dx + sla.cho_solve(Hfac, b - H @ dx)
            return dx

        def direction(E, el):
            rhs = -rd.copy()
            for F, Ej, rj in zip(Ft, E, rpt):
                rhs += np.einsum("kij,ij->k", F, Ej + rj)
            rhs += cone.G.T @ (el / wl + rpl / wl ** 2)
            dx = hsolve(rhs)
            dSt, dZt = [], []
            for (R, Rinv, lam), F, Ej, rj in zip(scal, Ft, E, rpt):
                d = np.tensordot(dx, F, axes=1) - rj
                d = 0.5 * (d + d.T)
                dSt.append(d)
                dZt.append(Ej - d)
            dsl = cone.G @ dx - rpl
            dst = dsl / wl
            dzt = el - dst
            return dx, dSt, dZt, dst, dzt

        def steplen(dSt, dZt, dst, dzt):
            a = min(_max_step_lp(laml, dst), _max_step_lp(laml, dzt))
            for (R, Rinv, lam), dS_, dZ_ in zip(scal, dSt, dZt):
                a = min(a, _max_step(lam, dS_), _max_step(lam, dZ_))
            return a

        # predictor
        E_aff = [-np.diag(lam) for (R, Rinv, lam) in scal]
        dx, dSt, dZt, dst, dzt = direction(E_aff, -laml)
        a_aff = min(1.0, steplen(dSt, dZt, dst, dzt))
        sigma = (1.0 - a_aff) ** 3
        # corrector
        E = []
        for (R, Rinv, lam), dS_, dZ_ in zip(scal, dSt, dZt):
            cross = 0.5 * (dS_ @ dZ_ + dZ_ @ dS_)
            rc = sigma * mu * np.eye(len(lam)) - np.diag(lam ** 2) - cross
            E.append(2.0 * rc / (lam[:, None] + lam[None, :]))
        el = (sigma * mu - laml ** 2 - dst * dzt) / laml
        dx, dSt, dZt, dst, dzt = direction(E, el)
        a = min(1.0, STEP_FRACTION * steplen(dSt, dZt, dst, dzt))
        if not np.isfinite(a) or a < 1e-12:
            info["status"] = "stalled"
            break

        x = x + a * dx
        for j in range(nb):
            R, Rinv, lam = scal[j]
            S[j] = R @ (np.diag(lam) + a * dSt[j]) @ R.T
            Z[j] = Rinv.T @ (np.diag(lam) + a * dZt[j]) @ Rinv
            S[j] = 0.5 * (S[j] + S[j].T)
            Z[j] = 0.5 * (Z[j] + Z[j].T)
        s = wl * (laml + a * dst)
        z = (laml + a * dzt) / wl
        log.debug("%s it=%d pobj=%.10g dobj=%.10g gap=%.2e dres=%.2e step=%.3f",
                  label, it, pobj, dobj, gap, dres, a)
    info["Z"], info["z"] = Z, z
    return x, Z, z, info


def _reduce(problem: SdpProblem):
    """Normalized blocks, lineality-free basis and column scaling."""
    consts, coeffs, names = [], [], []
    for con in problem.constraints:
        if con.size == 0:
            continue
        F = con.normalized()
        scale = max(np.abs(F.const).max(initial=0.0), np.abs(F.coeffs).max(initial=0.0), 1e-300)
        consts.append(F.const / scale)
        coeffs.append(F.coeffs / scale)
        names.append(con.name)
    N = problem.layout.size
    c = problem.objective
    cols = [A.reshape(N, -1) for A in coeffs] + [c[:, None]]
    stacked = np.hstack(cols) if cols else np.zeros((N, 0))
    if N == 0:
        basis = np.zeros((0, 0))
    else:
        U, sv, _ = np.linalg.svd(stacked, full_matrices=True)
        rank = int(np.sum(sv > 1e-10 * sv[0])) if sv.size and sv[0] > 0 else 0
        basis = U[:, :rank]
    # column scaling in the reduced coordinates
    red = [np.tensordot(basis.T, A, axes=1) for A in coeffs]
    norms = np.sqrt(sum(((A.reshape(A.shape[0], -1) ** 2).sum(axis=1) for A in red), np.zeros(basis.shape[1])))
    norms = np.where(norms > 0, norms, 1.0)
    basis = basis / norms[None, :]
    red = [A / norms[:, None, None] for A in red]
    return consts, red, basis, basis.T @ c, names


def _box(n, bound):
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.full(2 * n, bound)
    return G, h


def solve(problem: SdpProblem, opts: SolverOptions | None = None, **kw) -> SdpSolution:
    """Solve ``problem``; see the module docstring for the method."""
    opts = opts or SolverOptions(**kw)
    N = problem.layout.size
    consts, coeffs, basis, cr, names = _reduce(problem)
    nr = basis.shape[1]
    cscale = max(np.abs(cr).max(initial=0.0), 1e-300)
    info = {"n_vars": N, "n_reduced": nr, "blocks": names}

    def finish(xr, status, iters, gap=np.nan, extra=None):
        x = basis @ xr if nr else np.zeros(N)
        res = problem.residuals(x)
        worst = min(res.values()) if res else np.inf
        if status in ("optimal", "feasible") and worst < -opts.tol_feas:
            status = "numerical_failure"
            info["reason"] = f"constraint residual {worst:.3e} below -tol_feas"
        info.update(extra or {})
        info["residuals"] = res
        return SdpSolution(x, status, float(problem.objective @ x), float(worst), iters, gap, info)

    if not consts:
        # nothing to satisfy; only a zero objective is bounded
        if np.abs(cr).max(initial=0.0) > 0:
            return finish(np.zeros(nr), "numerical_failure", 0, extra={"reason": "unbounded objective"})
        return finish(np.zeros(nr), "optimal", 0, 0.0)

    bound = opts.bound
    iters = 0
    for attempt in range(opts.max_bound_growth + 1):
        # phase I over (x, t)
        eye_blocks = [np.eye(C.shape[0]) for C in consts]
        p1 = _Cone(
            consts=[C.copy() for C in consts],
            coeffs=[np.concatenate([A, I[None]], axis=0) for A, I in zip(coeffs, eye_blocks)],
            h=np.concatenate([np.full(2 * nr, bound), [1.0]]),
            G=np.vstack([np.hstack([_box(nr, bound)[0], np.zeros((2 * nr, 1))]),
                         np.concatenate([np.zeros(nr), [1.0]])[None, :]]),
            c=np.concatenate([np.zeros(nr), [1.0]]),
        )
        t0 = max(0.0, -min(min_eig(C) for C in consts)) + 1.0
        x1 = np.concatenate([np.zeros(nr), [t0]])
        Z1 = [np.eye(C.shape[0]) / p1.degree for C in consts]
        z1 = np.full(2 * nr + 1, 1.0 / p1.degree)
        x1, _, _, inf1 = _pd_solve(p1, x1, Z1, z1, opts, stop=lambda v: v[-1] < -0.5, label="phase1")
        iters += inf1["iterations"]
        t_star = x1[-1]
        info["phase1"] = {"t": float(t_star), "status": inf1["status"], "iterations": inf1["iterations"]}
        if t_star >= -opts.tol_feas:
            if inf1["status"] == "optimal":
                bmult = float(np.sum(inf1["z"][:2 * nr]))
                if bmult * bound > opts.tol_gap and attempt < opts.max_bound_growth:
                    bound *= 100.0
                    continue
                return finish(x1[:-1], "infeasible", iters, extra={"bound": bound})
            return finish(x1[:-1], "numerical_failure", iters,
                          extra={"reason": f"phase I ended with {inf1['status']}", "bound": bound})

        # phase II
        xr = x1[:-1]
        p2 = _Cone(consts=consts, coeffs=coeffs, h=np.full(2 * nr, bound),
                   G=_box(nr, bound)[0], c=cr / cscale)
        S, s = p2.slack(xr)
        if min(min_eig(Si) for Si in S) <= 0 or s.min() <= 0:
            return finish(xr, "numerical_failure", iters, extra={"reason": "phase I point not interior"})
        if np.abs(cr).max(initial=0.0) == 0:
            return finish(xr, "feasible", iters, 0.0, extra={"bound": bound})
        # start the dual on the central path of the phase-I point
        Z2 = [np.linalg.inv(Si) for Si in S]
        Z2 = [0.5 * (Zi + Zi.T) for Zi in Z2]
        z2 = 1.0 / s
        xr, Z2, z2, inf2 = _pd_solve(p2, xr, Z2, z2, opts, label="phase2", obj_scale=cscale)
        iters += inf2["iterations"]
        gap = inf2["gap"] * cscale
        info["phase2"] = {k: inf2[k] for k in ("status", "iterations", "dres")}
        bmult = float(np.sum(z2)) * bound
        info["bound"] = bound
        info["bound_sensitivity"] = bmult * cscale
        if inf2["status"] == "optimal":
            if bmult * cscale > 10 * opts.tol_gap * (1.0 + abs(inf2["pobj"]) * cscale) and attempt < opts.max_bound_growth:
                log.info("box bound %.3g affects the objective; enlarging", bound)
                bound *= 100.0
                continue
            return finish(xr, "optimal", iters, gap)
        if inf2["status"] == "max_iter":
            return finish(xr, "numerical_failure", iters, gap,
                          extra={"reason": "iteration limit reached in phase II"})
        return finish(xr, "feasible", iters, gap, extra={"reason": f"phase II ended with {inf2['status']}"})
    return finish(xr, "numerical_failure", iters, extra={"reason": "bound growth exhausted"})
