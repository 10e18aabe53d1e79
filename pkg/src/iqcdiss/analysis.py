"""Analysis pipelines: certificate search, frequency-domain spot checks and
randomized time-domain validation of the certificates."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import riccati, sim
from .lmi import (
    Constraint, SdpProblem, VarLayout, assemble_example_lmis, bmat, assemble_gamma_lmi,
    assemble_pn_lmis, filtered_graph, margin_for, structured_Z,
)
from .sdp import SolverOptions, max_eig, min_eig, solve
from .statespace import (
    Interval, Realization, UncertainPlant, cascade, freq_response, multiplier_filter,
    parametric_T, psi_basis, stack_J, static,
)

log = logging.getLogger(__name__)

GRID_POINTS = 200


class AnalysisError(RuntimeError):
    def __init__(self, status: str, message: str, constraint: str | None = None):
        super().__init__(message)
        self.status = status
        self.constraint = constraint


@dataclass
class AnalysisOptions:
    eps_margin: float = 1e-6
    solver: SolverOptions = field(default_factory=SolverOptions)
    wellposed_samples: int = 101
    boundary_points: int = 256


@dataclass
class SimOptions:
    dt: float = sim.DT_DEFAULT
    horizon: float = sim.HORIZON_DEFAULT
    n_random_runs: int = 1000
    seed: int = 42


@dataclass
class CertificateBundle:
    nu: int
    p: np.ndarray
    xcal: np.ndarray
    r: np.ndarray
    k: np.ndarray
    y: np.ndarray
    z_tilde: np.ndarray
    gamma: float | None = None
    k_are: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self) -> np.ndarray:
        return structured_Z(self.p)

    @property
    def n_filter(self) -> int:
        return 2 * self.nu

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "CertificateBundle":
        nu = int(data["nu"])

        def mat(key, r, c):
            v = data.get(key)
            if v is None:
                return None
            return np.asarray(v, dtype=float).reshape(r, c)

        n_x = len(data["xcal"])
        n_e = len(data["y"])
        return cls(
            nu=nu,
            p=mat("p", nu + 1, nu + 1),
            xcal=mat("xcal", n_x, n_x),
            r=mat("r", 2 * nu, 2 * nu),
            k=mat("k", nu, nu),
            y=mat("y", n_e, n_e),
            z_tilde=mat("z_tilde", 2 * nu, 2 * nu),
            gamma=None if data.get("gamma") is None else float(data["gamma"]),
            k_are=mat("k_are", nu, nu),
            diagnostics=dict(data.get("diagnostics", {})),
        )


@dataclass
class EllipsoidReport:
    y: np.ndarray
    trace: float
    boundary: np.ndarray
    containment: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# small checks


def default_grid() -> np.ndarray:
    """Log grid on ``[1e-3, 1e3]`` plus ``0`` and a large-frequency surrogate."""
    return np.concatenate([[0.0], np.logspace(-3, 3, GRID_POINTS), [1e6]])


def check_well_posedness(plant: UncertainPlant, interval: Interval, samples: int = 101) -> float:
    """Smallest ``|det(I - D delta)|`` over sampled ``delta``; raises if below the margin."""
    deltas = np.unique(np.concatenate([np.linspace(interval.alpha, interval.beta, samples),
                                       [interval.alpha, interval.beta]]))
    dets = [abs(np.linalg.det(np.eye(plant.n_z) - plant.d_zw * d)) for d in deltas]
    i = int(np.argmin(dets))
    if dets[i] < sim.WELLPOSED_MARGIN:
        raise sim.WellPosednessError(f"loop is not well posed at delta={deltas[i]:.6g}")
    # the determinant is affine in delta for a scalar channel; a sign change means a root
    if plant.n_z == 1:
        signs = np.sign([1.0 - plant.d_zw[0, 0] * d for d in (interval.alpha, interval.beta)])
        if signs[0] != signs[1]:
            raise sim.WellPosednessError("det(I - D delta) changes sign on the interval")
    return float(dets[i])


def hermitian_extremes(real: Realization, m, grid=None) -> tuple:
    """``(min, max)`` eigenvalue of ``H(iw)* m H(iw)`` over the grid."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    m = np.asarray(m, dtype=float)
    lo, hi = np.inf, -np.inf
    for w in grid:
        h = freq_response(real, w)
        ev = np.linalg.eigvalsh(h.conj().T @ m @ h)
        lo, hi = min(lo, ev[0]), max(hi, ev[-1])
    return float(lo), float(hi)


def fdi_sample_check(filt: Realization, m, g: Realization, grid=None) -> float:
    """Largest eigenvalue of ``[G; I]* filt* m filt [G; I]`` over the grid (negative is good)."""
    return hermitian_extremes(filtered_graph(filt, g), m, grid)[1]


def positivity_check(xcal, z) -> float:
    """``min_eig(xcal - diag(z, 0))``."""
    xcal = np.asarray(xcal, dtype=float)
    z = np.asarray(z, dtype=float)
    s = xcal.copy()
    k = z.shape[0]
    s[:k, :k] -= z
    return min_eig(s)


def gamma_bisection(xcal, m, psi: Realization, plant: UncertainPlant, T=None,
                    lo: float = 1e-6, hi: float = 1e12, rel_tol: float = 1e-3, eps: float = 0.0) -> float:
    """Smallest ``gamma`` in ``[lo, hi]`` (to ``rel_tol``) with the dissipation matrix ``<= -eps I``."""
    if not 0 < lo <= hi:
        raise ValueError("need 0 < lo <= hi")

    # congruence with diag(I, I/sqrt(g)) on the d block keeps the sign test
    # accurate when -g I dwarfs the rest of the matrix
    nd = plant.n_d

    def ok(g):
        mat = assemble_gamma_lmi(xcal, m, psi, plant, g, T)
        sc = np.ones(mat.shape[0])
        sc[mat.shape[0] - nd:] = 1.0 / np.sqrt(g)
        return max_eig(mat * np.outer(sc, sc)) <= -eps

    if not ok(hi):
        raise ValueError(f"no feasible gamma up to {hi:.3g}")
    if ok(lo):
        return lo
    while hi / lo > 1.0 + rel_tol:
        mid = np.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)


def ellipse_boundary_points(y, count: int = 256) -> tuple:
    """``(theta, points)`` with ``points[k] = y^{1/2} (cos theta_k, sin theta_k)``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (2, 2):
        raise ValueError("ellipse needs a 2x2 matrix")
    w, v = np.linalg.eigh(0.5 * (y + y.T))
    if w[0] <= 0:
        raise ValueError("y must be positive definite")
    root = v @ np.diag(np.sqrt(w)) @ v.T
    theta = 2 * np.pi * np.arange(count) / count
    return theta, np.column_stack([np.cos(theta), np.sin(theta)]) @ root.T


def soft_iqc_identity_residual(nu: int, p, interval: Interval, delta: float, grid=None) -> float:
    """Largest deviation between ``[1; d]* Pi [1; d]`` and ``(Psi J)* M (Psi J) (1 - d/beta)(d - alpha)``."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    psi = multiplier_filter(nu)
    m = structured_Z(p)
    T = parametric_T(interval)
    psiT = cascade(psi, static(T))
    psiJ = cascade(psi, static(stack_J()))
    factor = (1.0 - delta / interval.beta) * (delta - interval.alpha)
    v = np.array([[1.0], [delta]])
    worst = 0.0
    for w in grid:
        ht = freq_response(psiT, w) @ v
        hj = freq_response(psiJ, w)
        lhs = (ht.conj().T @ m @ ht)[0, 0]
        rhs = (hj.conj().T @ m @ hj)[0, 0] * factor
        scale = 1.0 + abs(lhs) + abs(rhs)
        worst = max(worst, abs(lhs - rhs) / scale)
    return float(worst)


# --------------------------------------------------------------------------
# pipelines


def _failing_constraint(problem: SdpProblem, x) -> str:
    res = problem.residuals(x)
    return min(res, key=res.get) if res else ""


def robust_ellipsoid_analysis(plant: UncertainPlant, interval: Interval, nu: int,
                              opts: AnalysisOptions | None = None) -> tuple:
    """Smallest-trace invariant ellipsoid for unit-energy disturbances.

    Returns ``(CertificateBundle, EllipsoidReport)``; raises :class:`AnalysisError`
    when the LMIs cannot be certified.
    """
    opts = opts or AnalysisOptions()
    check_well_posedness(plant, interval, opts.wellposed_samples)
    problem = assemble_example_lmis(plant, interval, nu, opts.eps_margin)
    sol = solve(problem, opts.solver)
    log.info("nu=%d: status %s, trace %.10g, %d iterations", nu, sol.status, sol.objective, sol.iterations)
    if sol.status == "infeasible":
        name = _failing_constraint(problem, sol.x)
        raise AnalysisError("infeasible", f"LMIs infeasible for nu={nu}; most violated: {name}", name)
    if not sol.ok:
        raise AnalysisError("numerical_failure",
                            f"solver failed for nu={nu}: {sol.info.get('reason', sol.status)}")
    lay = problem.layout
    p, xcal, r, k, y = (lay.value(name, sol.x) for name in ("P", "X", "R", "K", "Y"))
    diag = {
        "status": sol.status,
        "objective": sol.objective,
        "iterations": sol.iterations,
        "gap": float(sol.gap),
        "residuals": {kk: float(v) for kk, v in sol.info["residuals"].items()},
    }
    psi = psi_basis(nu)
    k_are = None
    try:
        k_are = riccati.solve_nonsym_are(psi, psi, p)
    except (riccati.RiccatiError, np.linalg.LinAlgError) as exc:
        diag["are_error"] = str(exc)
    T = parametric_T(interval, plant.n_z)
    gamma = None
    try:
        gamma = gamma_bisection(xcal, structured_Z(p), multiplier_filter(nu), plant, T)
    except ValueError as exc:
        diag["gamma_error"] = str(exc)
    bundle = CertificateBundle(nu, p, xcal, r, k, y, riccati.terminal_cost_from_K(k).z, gamma, k_are, diag)
    report = EllipsoidReport(y, float(np.trace(y)), ellipse_boundary_points(y, opts.boundary_points)[1])
    return bundle, report


@dataclass
class StabilityVerdict:
    certified: bool
    status: str
    p: np.ndarray | None = None
    xcal: np.ndarray | None = None
    r: np.ndarray | None = None
    k: np.ndarray | None = None
    coupling_margin: float = np.nan
    info: dict = field(default_factory=dict)


def robust_stability_test(g: Realization, interval: Interval, nu: int,
                          opts: AnalysisOptions | None = None) -> StabilityVerdict:
    """Search ``(P, Xcal, R, K)`` certifying stability of ``w = delta G w`` for ``delta`` in the interval.

    An unsuccessful search means "not certified", not instability.
    """
    opts = opts or AnalysisOptions()
    if g.m != 1 or g.p != 1:
        raise ValueError("the basis multipliers handle a scalar uncertainty channel")
    if not g.is_stable():
        raise ValueError("G must be stable")
    # det(1 - d delta) is affine in delta: check the endpoints and a sign change
    d = float(g.d[0, 0])
    ends = [1.0 - d * interval.alpha, 1.0 - d * interval.beta]
    if min(abs(v) for v in ends) < sim.WELLPOSED_MARGIN or ends[0] * ends[1] < 0:
        return StabilityVerdict(False, "ill_posed")
    lay = (VarLayout().add_general("P", nu + 1, nu + 1).add_sym("X", 2 * nu + g.n)
           .add_sym("R", 2 * nu).add_general("K", nu, nu))
    N = lay.size
    psi = multiplier_filter(nu)
    pos, plant_lmi = assemble_pn_lmis(psi, interval, g, lay, opts.eps_margin)
    Z = structured_Z(lay.expr("K"))
    rk = lay.expr("R") - Z
    zpad = bmat([[Z, np.zeros((2 * nu, g.n))], [np.zeros((g.n, 2 * nu)), np.zeros((g.n, g.n))]], N)
    coup = lay.expr("X") - zpad
    cons = [pos, plant_lmi,
            Constraint("terminal", rk, "<", margin_for(rk.const, opts.eps_margin)),
            Constraint("coupling", coup, ">", margin_for(coup.const, opts.eps_margin))]
    problem = SdpProblem(lay, np.zeros(N), cons)
    sol = solve(problem, opts.solver)
    if not sol.ok:
        name = _failing_constraint(problem, sol.x) if sol.status == "infeasible" else None
        return StabilityVerdict(False, sol.status, info={"constraint": name, **sol.info})
    vals = {nm: lay.value(nm, sol.x) for nm in ("P", "X", "R", "K")}
    margin = positivity_check(vals["X"], structured_Z(vals["K"])) if vals["X"].size else np.inf
    return StabilityVerdict(True, sol.status, vals["P"], vals["X"], vals["R"], vals["K"], margin, sol.info)


# --------------------------------------------------------------------------
# randomized validation


def _chunks(total, size):
    for start in range(0, total, size):
        yield start, min(size, total - start)


def validate_invariance(plant: UncertainPlant, interval: Interval, y, sim_opts: SimOptions | None = None,
                        chunk: int = 250) -> dict:
    """Random loops from rest: ``e(T)' Y^{-1} e(T) <= int_0^T |d|^2`` at every sample.

    ``delta`` is uniform on the interval and ``d`` a random held signal of unit energy.
    """
    so = sim_opts or SimOptions()
    rng = np.random.default_rng(so.seed)
    steps = int(round(so.horizon / so.dt))
    yinv = np.linalg.inv(np.asarray(y, dtype=float))
    se = -plant.c_e.T @ yinv @ plant.c_e
    n, nd = plant.n, plant.n_d
    qd = np.zeros((n + nd, n + nd))
    qd[n:, n:] = np.eye(nd)
    worst, max_ratio, violations = np.inf, 0.0, 0
    deltas_all = rng.uniform(interval.alpha, interval.beta, size=so.n_random_runs)
    for start, size in _chunks(so.n_random_runs, chunk):
        deltas = deltas_all[start:start + size]
        loops = [sim.closed_loop(plant, float(dl)) for dl in deltas]
        a = np.stack([cl.a for cl in loops])
        b = np.stack([cl.b for cl in loops])
        d = sim.random_disturbances(rng, size, steps, so.dt, nd)
        out = sim.quadratic_margins(a, b, d, so.dt, {"margin": (se, qd), "energy": (None, qd),
                                                      "excursion": (se, None)})
        energy = out["energy"]["final"]
        margin = out["margin"]["min"]
        tol = 1e-5 * (1.0 + energy)
        violations += int(np.sum(margin < -tol))
        worst = min(worst, float(np.min(margin / (1.0 + energy))))
        # largest e'Y^{-1}e reached (the excursion check records its running minimum of -e'Y^{-1}e)
        max_ratio = max(max_ratio, float(np.max(-out["excursion"]["min"])))
    return {"n_runs": so.n_random_runs, "violations": violations, "worst_relative_margin": worst,
            "max_excursion": max_ratio, "horizon": so.horizon, "dt": so.dt, "seed": so.seed}


def validate_certificates(plant: UncertainPlant, interval: Interval, bundle: CertificateBundle,
                          sim_opts: SimOptions | None = None, chunk: int = 250) -> dict:
    """Random filtered loops: invariance, finite-horizon IQC (both terminal costs) and dissipation margins."""
    so = sim_opts or SimOptions()
    rng = np.random.default_rng(so.seed)
    steps = int(round(so.horizon / so.dt))
    nu = bundle.nu
    nf = 2 * nu
    psiT = cascade(multiplier_filter(nu), static(parametric_T(interval, plant.n_z)))
    m = bundle.m
    ny = psiT.p
    n = nf + plant.n
    nd = plant.n_d
    N = n + nd

    def embed_state(s_xi=None, s_x=None):
        out = np.zeros((n, n))
        if s_xi is not None:
            out[:nf, :nf] = s_xi
        if s_x is not None:
            out[nf:, nf:] = s_x
        return out

    yinv = np.linalg.inv(bundle.y)
    s_inv = embed_state(s_x=-plant.c_e.T @ yinv @ plant.c_e)
    qd = np.zeros((N, N))
    qd[n:, n:] = np.eye(nd)
    checks_static = {"invariance": (s_inv, qd), "energy": (None, qd)}
    terminal = {"iqc_convex": bundle.z_tilde}
    if bundle.k_are is not None:
        terminal["iqc_are"] = riccati.terminal_cost_from_K(bundle.k_are).z
    s_diss = None
    if bundle.gamma is not None:
        s_diss = -np.array(bundle.xcal, dtype=float)
        s_diss[:nf, :nf] += bundle.z_tilde

    results = {k: {"violations": 0, "worst_relative_margin": np.inf} for k in
               ["invariance", *terminal, *(["dissipation"] if s_diss is not None else [])]}
    deltas_all = rng.uniform(interval.alpha, interval.beta, size=so.n_random_runs)
    for start, size in _chunks(so.n_random_runs, chunk):
        deltas = deltas_all[start:start + size]
        loops = [sim.filtered_loop(plant, float(dl), psiT) for dl in deltas]
        a = np.stack([r.a for r in loops])
        b = np.stack([r.b for r in loops])
        c = np.stack([r.c for r in loops])
        dd = np.stack([r.d for r in loops])
        cy, dy = c[:, :ny], dd[:, :ny]
        cz, dz = c[:, ny:ny + plant.n_z], dd[:, ny:ny + plant.n_z]
        q_supply = sim.output_form(cy, dy, m)
        checks = dict(checks_static)
        checks["y_energy"] = (None, sim.output_form(cy, dy, np.eye(ny)))
        for name, z in terminal.items():
            checks[name] = (embed_state(s_xi=z), q_supply)
        if s_diss is not None:
            g = bundle.gamma
            checks["dissipation"] = (s_diss, -sim.output_form(cz, dz, np.eye(plant.n_z)) / g + g * qd)
        d = sim.random_disturbances(rng, size, steps, so.dt, nd)
        out = sim.quadratic_margins(a, b, d, so.dt, checks)
        energy = out["energy"]["final"]
        scales = {"invariance": 1.0 + energy, "dissipation": 1.0 + (bundle.gamma or 0.0) * energy}
        for name in terminal:
            scales[name] = 1.0 + out["y_energy"]["final"]
        for name, res in results.items():
            rel = out[name]["min"] / scales[name]
            res["violations"] += int(np.sum(rel < -1e-5))
            res["worst_relative_margin"] = min(res["worst_relative_margin"], float(rel.min()))
    return {"n_runs": so.n_random_runs, "checks": results, "horizon": so.horizon, "dt": so.dt,
            "seed": so.seed}


def iqc_margins(nu: int, p, k, interval: Interval, n_pairs: int = 100, horizon: float = 10.0,
                dt: float = 1e-3, seed: int = 42) -> np.ndarray:
    """Relative finite-horizon IQC margins of the filter driven by ``col(z, delta z)``.

    One entry per random ``(delta, z)`` pair, normalized by ``1 + int |y|^2``.
    """
    rng = np.random.default_rng(seed)
    psiT = cascade(multiplier_filter(nu), static(parametric_T(interval)))
    m = structured_Z(p)
    z_term = riccati.terminal_cost_from_K(k).z
    steps = int(round(horizon / dt))
    deltas = rng.uniform(interval.alpha, interval.beta, size=n_pairs)
    filters = [sim.uncertainty_filter(psiT, float(dl)) for dl in deltas]
    if nu == 0:
        # static filter: the margin is the pointwise supply
        out = []
        for f in filters:
            z = sim.random_disturbances(rng, 1, steps, dt)[0]
            y = z @ f.d.T
            supply = np.concatenate([[0.0], np.cumsum(np.einsum("ki,ij,kj->k", y, m, y) * dt)])
            out.append(supply.min() / (1.0 + dt * float(np.sum(y * y))))
        return np.array(out)
    a = np.stack([f.a for f in filters])
    b = np.stack([f.b for f in filters])
    cy = np.stack([f.c for f in filters])
    dy = np.stack([f.d for f in filters])
    z = sim.random_disturbances(rng, n_pairs, steps, dt)
    out = sim.quadratic_margins(a, b, z, dt, {
        "iqc": (z_term, sim.output_form(cy, dy, m)),
        "y_energy": (None, sim.output_form(cy, dy, np.eye(m.shape[0]))),
    })
    return out["iqc"]["min"] / (1.0 + out["y_energy"]["final"])


def worst_case_excursions(plant: UncertainPlant, delta: float, y, n_dirs: int = 5,
                          horizon: float = sim.HORIZON_DEFAULT, dt: float = sim.DT_DEFAULT) -> dict:
    """Worst-case unit-energy inputs along ``n_dirs`` angles ``2 pi k / n_dirs``.

    Returns the angles, ``max_T e(T)' Y^{-1} e(T)`` per trajectory and the
    relative distance of ``e(horizon)`` from the predicted boundary point.
    """
    yinv = np.linalg.inv(np.asarray(y, dtype=float))
    angles = 2 * np.pi * np.arange(n_dirs) / n_dirs
    cases = [sim.worst_case_disturbance(plant, delta, [np.cos(t), np.sin(t)], horizon, dt) for t in angles]
    cl = sim.closed_loop(plant, delta)
    n, nd = plant.n, plant.n_d
    se = -plant.c_e.T @ yinv @ plant.c_e
    d = np.stack([c.d for c in cases])
    out = sim.quadratic_margins(np.broadcast_to(cl.a, (n_dirs, n, n)), np.broadcast_to(cl.b, (n_dirs, n, nd)),
                                d, dt, {"excursion": (se, None)})
    # final states from a plain run give the boundary mismatch
    mismatch = []
    for c in cases:
        tr = sim.simulate_zoh(cl, c.d, dt)
        e_end = plant.c_e @ tr["x"][-1]
        mismatch.append(float(np.linalg.norm(e_end - c.e_target) / np.linalg.norm(c.e_target)))
    return {"delta": float(delta), "angles": angles, "max_ratio": -out["excursion"]["min"],
            "boundary_mismatch": np.array(mismatch)}


def certificate_margins(plant: UncertainPlant, interval: Interval, bundle: CertificateBundle,
                        eps_margin: float = 1e-6) -> dict:
    """Re-evaluate the example LMIs at the stored certificates.

    Returns per constraint the smallest eigenvalue of the normalized expression
    together with its margin; coherent certificates have residual ``>= -margin/2``.
    """
    problem = assemble_example_lmis(plant, interval, bundle.nu, eps_margin)
    x = problem.layout.pack({"P": bundle.p, "X": bundle.xcal, "R": bundle.r, "K": bundle.k, "Y": bundle.y})
    return {c.name: {"residual": c.residual(x), "margin": c.margin} for c in problem.constraints}
