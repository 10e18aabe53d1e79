"""Time-domain engine: uncertain loops, exact zero-order-hold simulation and
quadratic integrals along the resulting trajectories.

Inputs are held constant on each interval ``[k dt, (k+1) dt)``. States are exact at
the sample times, and every running integral of a quadratic form in
``(state, input)`` is evaluated exactly over each hold interval (Van Loan's
block exponential), so discrete margins differ from the continuous-time ones
only by rounding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .statespace import Realization, UncertainPlant, cascade, is_hurwitz, static

log = logging.getLogger(__name__)

WELLPOSED_MARGIN = 1e-9
DT_DEFAULT = 1e-3
HORIZON_DEFAULT = 30.0
SIM_BLOCK = 50


class WellPosednessError(ValueError):
    pass


@dataclass
class Trajectory:
    """Uniformly sampled named channels, each of shape ``(K + 1, dim)``."""

    dt: float
    channels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        lengths = {v.shape[0] for v in self.channels.values()}
        if len(lengths) > 1:
            raise ValueError(f"channels have different lengths {sorted(lengths)}")

    @property
    def n_samples(self) -> int:
        return next(iter(self.channels.values())).shape[0] if self.channels else 0

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.n_samples)

    def __getitem__(self, name) -> np.ndarray:
        return self.channels[name]

    def __contains__(self, name):
        return name in self.channels


# --------------------------------------------------------------------------
# loops


def _wellposed_gain(plant: UncertainPlant, delta: float) -> np.ndarray:
    m = np.eye(plant.n_z) - plant.d_zw * delta
    det = np.linalg.det(m)
    if abs(det) < WELLPOSED_MARGIN:
        raise WellPosednessError(f"loop is not well posed at delta={delta} (det {det:.3g})")
    return np.linalg.inv(m)


def closed_loop(plant: UncertainPlant, delta: float) -> Realization:
    """Loop with ``w = delta z`` as a map ``d -> col(z, w, e, x)``."""
    g = _wellposed_gain(plant, delta)
    cz = g @ plant.c_z
    dz = g @ plant.d_zd
    a = plant.a + delta * plant.b_w @ cz
    b = plant.b_d + delta * plant.b_w @ dz
    n, nd = plant.n, plant.n_d
    c = np.vstack([cz, delta * cz, plant.c_e, np.eye(n)])
    d = np.vstack([dz, delta * dz, np.zeros((plant.n_e + n, nd))])
    return Realization(a, b, c, d)


def loop_channels(plant: UncertainPlant) -> dict:
    """Row slices of the :func:`closed_loop` output."""
    nz, nw, ne, n = plant.n_z, plant.n_w, plant.n_e, plant.n
    edges = np.cumsum([0, nz, nw, ne, n])
    return {k: slice(int(edges[i]), int(edges[i + 1])) for i, k in enumerate("zwex")}


def filtered_loop(plant: UncertainPlant, delta: float, filt: Realization) -> Realization:
    """Filter driven by ``col(z, w)`` of the loop, state ``col(xi, x)``.

    Outputs are ``col(y, z, w, e, x)``.
    """
    cl = closed_loop(plant, delta)
    ch = loop_channels(plant)
    zw = Realization(cl.a, cl.b, cl.c[: ch["w"].stop], cl.d[: ch["w"].stop])
    inner = cascade(filt, zw)
    nf = filt.n
    c = np.vstack([inner.c, np.hstack([np.zeros((cl.p, nf)), cl.c])])
    d = np.vstack([inner.d, cl.d])
    return Realization(inner.a, inner.b, c, d)


def uncertainty_filter(filt: Realization, delta: float, n_z: int = 1) -> Realization:
    """``filt * col(I, delta I)``: the filter seen from ``z`` when ``w = delta z``."""
    return cascade(filt, static(np.vstack([np.eye(n_z), delta * np.eye(n_z)])))


# --------------------------------------------------------------------------
# exact hold discretization


def zoh(a, b, dt):
    """``(Phi, Gamma)`` of the held-input discretization; batch dimensions allowed."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = b.shape[-2], b.shape[-1]
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    blk = np.zeros(batch + (n + m, n + m))
    blk[..., :n, :n] = a
    blk[..., :n, n:] = b
    e = sla.expm(blk * dt) if n else np.eye(n + m) + 0 * blk
    return e[..., :n, :n], e[..., :n, n:]


def hold_integral(a, b, q, dt):
    """``W`` with ``int_0^dt v(t)' q v(t) dt = v(0)' W v(0)`` for ``v = (x, u)``, ``u`` held."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    n, m = b.shape[-2], b.shape[-1]
    N = n + m
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2], q.shape[:-2])
    ah = np.zeros(batch + (N, N))
    ah[..., :n, :n] = a
    ah[..., :n, n:] = b
    big = np.zeros(batch + (2 * N, 2 * N))
    big[..., :N, :N] = -np.swapaxes(ah, -1, -2)
    big[..., :N, N:] = q
    big[..., N:, N:] = ah
    f = sla.expm(big * dt)
    w = np.swapaxes(f[..., N:, N:], -1, -2) @ f[..., :N, N:]
    return 0.5 * (w + np.swapaxes(w, -1, -2))


def output_form(c, d, m) -> np.ndarray:
    """Quadratic form on ``(x, u)`` equal to ``y' m y`` for ``y = c x + d u``."""
    cd = np.concatenate([np.asarray(c, dtype=float), np.asarray(d, dtype=float)], axis=-1)
    return np.swapaxes(cd, -1, -2) @ np.asarray(m, dtype=float) @ cd


class EnergyAccumulator:
    """Running exact integrals of quadratic forms in ``(state, held input)``.

    ``forms`` maps names to symmetric matrices of size ``n + m`` (optionally with
    leading batch dimensions).
    """

    def __init__(self, a, b, dt, forms: dict):
        self.names = list(forms)
        self.dt = dt
        if self.names:
            ws = [hold_integral(a, b, forms[k], dt) for k in self.names]
            batch = np.broadcast_shapes(*(w.shape[:-2] for w in ws))
            self._w = np.stack([np.broadcast_to(w, batch + w.shape[-2:]) for w in ws], axis=-3)
        else:
            self._w = None
        self.totals = None

    def increments(self, x, u) -> np.ndarray:
        """Integral over one hold interval for each form, shape ``batch + (F,)``."""
        v = np.concatenate([x, u], axis=-1)
        return np.einsum("...i,...fij,...j->...f", v, self._w, v)

    def step(self, x, u):
        inc = self.increments(x, u)
        self.totals = inc if self.totals is None else self.totals + inc
        return self.totals


def simulate_zoh(r: Realization, u, dt: float, x0=None, forms: dict | None = None) -> Trajectory:
    """Held-input simulation with channels ``u``, ``x``, ``y`` and ``int_<name>`` per form."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = np.asarray(u, dtype=float).reshape(-1, r.m)
    K = u.shape[0]
    phi, gam = zoh(r.a, r.b, dt)
    x = np.zeros((K + 1, r.n))
    if x0 is not None:
        x[0] = x0
    # advance SIM_BLOCK steps per product with the exact lifted map
    lift_full = _lifted(phi[None], gam[None], SIM_BLOCK)[0] if K >= SIM_BLOCK else None
    for k0 in range(0, K, SIM_BLOCK):
        L = min(SIM_BLOCK, K - k0)
        lift = lift_full if L == SIM_BLOCK else _lifted(phi[None], gam[None], L)[0]
        z = np.concatenate([x[k0], u[k0:k0 + L].ravel()])
        x[k0 + 1:k0 + L + 1] = (lift[r.n:] @ z).reshape(L, r.n)
    # the input sample at t_K is the last held value (it does not act)
    u_full = np.vstack([u, u[-1:] if K else np.zeros((1, r.m))])
    y = x @ r.c.T + u_full @ r.d.T
    ch = {"u": u_full, "x": x, "y": y}
    if forms:
        acc = EnergyAccumulator(r.a, r.b, dt, forms)
        inc = acc.increments(x[:-1], u)
        run = np.vstack([np.zeros((1, len(acc.names))), np.cumsum(inc, axis=0)])
        for i, name in enumerate(acc.names):
            ch[f"int_{name}"] = run[:, i:i + 1]
    return Trajectory(dt, ch)


def filter_response(filt: Realization, u, dt: float, m=None) -> Trajectory:
    """Filter from rest driven by ``u``; channels ``u``, ``xi``, ``y`` (and ``int_supply``)."""
    forms = None if m is None else {"supply": output_form(filt.c, filt.d, m)}
    tr = simulate_zoh(filt, u, dt, forms=forms)
    ch = dict(tr.channels)
    ch["xi"] = ch.pop("x")
    if "int_supply" in ch:
        ch["int_supply"] = ch["int_supply"]
    return Trajectory(dt, ch)


# --------------------------------------------------------------------------
# margins


def check_finite_horizon_iqc(m, z_term, y, xi, dt, integral=None) -> float:
    """``min_T [int_0^T y'My + xi(T)' Z xi(T)]`` over the sample times.

    ``integral`` is the running integral of ``y'My`` if it is known exactly;
    otherwise the left-rectangle rule on ``y`` is used.
    """
    m = np.asarray(m, dtype=float)
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float).reshape(y.shape[0], -1)
    if integral is None:
        inc = np.einsum("ki,ij,kj->k", y[:-1], m, y[:-1]) * dt
        integral = np.concatenate([[0.0], np.cumsum(inc)])
    integral = np.asarray(integral, dtype=float).reshape(-1)
    z_term = np.asarray(z_term, dtype=float).reshape(xi.shape[1], xi.shape[1])
    term = np.einsum("ki,ij,kj->k", xi, z_term, xi)
    return float(np.min(integral + term))


def check_dissipation(xcal, z_term, gamma, xi, x, z_int, d_int) -> float:
    """``min_T -[eta' (Xcal - diag(Z, 0)) eta + int |z|^2/gamma - gamma int |d|^2]``.

    ``z_int`` and ``d_int`` are running integrals of ``|z|^2`` and ``|d|^2``.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    xi = np.asarray(xi, dtype=float)
    x = np.asarray(x, dtype=float)
    eta = np.hstack([xi.reshape(x.shape[0], -1), x])
    nxi = eta.shape[1] - x.shape[1]
    s = np.array(xcal, dtype=float)
    s[:nxi, :nxi] -= np.asarray(z_term, dtype=float).reshape(nxi, nxi)
    store = np.einsum("ki,ij,kj->k", eta, s, eta)
    val = store + np.ravel(z_int) / gamma - gamma * np.ravel(d_int)
    return float(np.min(-val))


def _lifted(phi, gam, L):
    """Map ``(x_k, u_k..u_{k+L-1})`` to ``(x_k, ..., x_{k+L})``; shape ``(R, (L+1) n, n + L m)``."""
    R, n, _ = phi.shape
    m = gam.shape[-1]
    out = np.zeros((R, (L + 1) * n, n + L * m))
    out[:, :n, :n] = np.eye(n)
    for i in range(1, L + 1):
        prev = out[:, (i - 1) * n: i * n]
        cur = out[:, i * n: (i + 1) * n]
        cur[:] = phi @ prev
        cur[:, :, n + (i - 1) * m: n + i * m] += gam
    return out


def quadratic_margins(a, b, u, dt, checks: dict, block: int = 10) -> dict:
    """Batched held-input runs from rest with margins ``x(T)' S x(T) + int_0^T v' Q v``.

    ``a (R, n, n)``, ``b (R, n, m)``, ``u (R, K, m)``; ``checks`` maps a name to
    ``(S, Q)`` with ``S (R, n, n)`` or ``None`` and ``Q (R, n+m, n+m)`` or
    ``None``. Returns per check the minimum over sample times (including
    ``T = 0``), the sample index where it occurs and the final value, each of
    shape ``(R,)``. States are advanced ``block`` steps at a time through the
    lifted map, which is exact and keeps the Python loop short.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    R, K, m = u.shape
    n = a.shape[-1]
    a = np.broadcast_to(a, (R, n, n))
    b = np.broadcast_to(b, (R, n, m))
    names = list(checks)
    F = len(names)
    N = n + m
    S = np.zeros((R, F, n, n))
    W = np.zeros((R, F, N, N))
    for f, k in enumerate(names):
        s_k, q_k = checks[k]
        if s_k is not None:
            S[:, f] = s_k
        if q_k is not None:
            W[:, f] = hold_integral(a, b, np.broadcast_to(q_k, (R, N, N)), dt)
    W_flat = W.transpose(0, 2, 1, 3).reshape(R, N, F * N)
    S_flat = S.transpose(0, 2, 1, 3).reshape(R, n, F * n)
    phi, gam = zoh(a, b, dt)

    total = np.zeros((R, F))
    best = np.zeros((R, F))  # value at T = 0 from rest
    arg = np.zeros((R, F), dtype=int)
    val_last = best
    x = np.zeros((R, n))
    lift_full = _lifted(phi, gam, block) if K >= block else None
    for k0 in range(0, K, block):
        L = min(block, K - k0)
        lift = lift_full if L == block else _lifted(phi, gam, L)
        ub = u[:, k0:k0 + L]
        z = np.concatenate([x, ub.reshape(R, L * m)], axis=1)
        X = np.matmul(lift, z[:, :, None])[:, :, 0].reshape(R, L + 1, n)
        V = np.concatenate([X[:, :L], ub], axis=2)
        VW = np.matmul(V, W_flat).reshape(R, L, F, N)
        inc = np.einsum("rlfi,rli->rlf", VW, V)
        XS = np.matmul(X[:, 1:], S_flat).reshape(R, L, F, n)
        term = np.einsum("rlfi,rli->rlf", XS, X[:, 1:])
        val = total[:, None, :] + np.cumsum(inc, axis=1) + term
        total = total + inc.sum(axis=1)
        kmin = np.argmin(val, axis=1)
        vmin = np.take_along_axis(val, kmin[:, None, :], axis=1)[:, 0]
        lower = vmin < best
        best = np.where(lower, vmin, best)
        arg = np.where(lower, k0 + 1 + kmin, arg)
        val_last = val[:, -1]
        x = X[:, -1]
    return {name: {"min": best[:, i], "k_min": arg[:, i], "final": val_last[:, i]}
            for i, name in enumerate(names)}


# --------------------------------------------------------------------------
# gramians and worst-case inputs


def gramian(a, b) -> np.ndarray:
    """Infinite-horizon controllability gramian ``a W + W a' + b b' = 0``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
    if not is_hurwitz(a):
        raise ValueError("gramian needs a Hurwitz state matrix")
    bb = b @ b.T
    w = sla.solve_continuous_lyapunov(a, -bb)
    w = 0.5 * (w + w.T)
    res = np.linalg.norm(a @ w + w @ a.T + bb, 2)
    if res > 1e-10 * (1.0 + np.linalg.norm(bb, 2)):
        raise np.linalg.LinAlgError(f"Lyapunov residual {res:.3g}")
    return w


def hold_gramian(a, b, dt: float, steps: int) -> np.ndarray:
    """Reachability gramian of the held-input system over ``steps`` intervals.

    Scaled by ``1/dt`` so that unit input energy ``dt * sum |u_k|^2`` reaches
    ``{x : x' W^{-1} x <= 1}``; tends to the continuous finite-horizon gramian
    as ``dt -> 0``.
    """
    phi, gam = zoh(a, b, dt)
    gg = gam @ gam.T / dt
    w_inf = sla.solve_discrete_lyapunov(phi, gg)
    phik = np.linalg.matrix_power(phi, steps)
    w = w_inf - phik @ w_inf @ phik.T
    return 0.5 * (w + w.T)


@dataclass
class WorstCase:
    d: np.ndarray  # (K, n_d) held samples with dt * sum |d|^2 = 1
    e_target: np.ndarray
    x_target: np.ndarray
    e_cov: np.ndarray  # C_e W C_e'


def worst_case_disturbance(plant: UncertainPlant, delta: float, direction, horizon: float = HORIZON_DEFAULT,
                           dt: float = DT_DEFAULT) -> WorstCase:
    """Unit-energy held input driving ``e`` to the reachable-set boundary along ``direction`` at ``horizon``."""
    cl = closed_loop(plant, delta)
    if not cl.is_stable():
        raise ValueError(f"loop is unstable at delta={delta}")
    steps = int(round(horizon / dt))
    w = hold_gramian(cl.a, cl.b, dt, steps)
    ce = plant.c_e
    cov = ce @ w @ ce.T
    if np.linalg.matrix_rank(cov) < cov.shape[0] or np.linalg.cond(cov) > 1e12:
        raise np.linalg.LinAlgError("performance output is not reachable in every direction")
    u = np.asarray(direction, dtype=float).reshape(-1)
    u = u / np.linalg.norm(u)
    e_star = u / np.sqrt(u @ np.linalg.solve(cov, u))
    x_f = w @ ce.T @ np.linalg.solve(cov, e_star)
    lam = np.linalg.solve(w, x_f)
    phi, gam = zoh(cl.a, cl.b, dt)
    # d_k = gam' (phi')^(K-1-k) lam / dt, built SIM_BLOCK samples at a time
    B = SIM_BLOCK
    pows = np.empty((B, phi.shape[0], phi.shape[0]))
    pows[0] = np.eye(phi.shape[0])
    for j in range(1, B):
        pows[j] = phi.T @ pows[j - 1]
    step_b = phi.T @ pows[-1]
    rev = np.zeros((steps, cl.m))
    mu = lam
    for j0 in range(0, steps, B):
        L = min(B, steps - j0)
        rev[j0:j0 + L] = (pows[:L] @ mu) @ gam / dt
        mu = step_b @ mu
    d = rev[::-1].copy()
    energy = dt * float(np.sum(d * d))
    d /= np.sqrt(energy)
    return WorstCase(d, e_star, x_f, cov)


def random_disturbances(rng: np.random.Generator, runs: int, steps: int, dt: float, n_d: int = 1) -> np.ndarray:
    """Held random inputs of unit energy with mixed hold lengths and active windows."""
    out = np.zeros((runs, steps, n_d))
    holds = np.array([1, 10, 100, 1000])
    for r in range(runs):
        h = int(rng.choice(holds))
        vals = rng.standard_normal(((steps + h - 1) // h, n_d))
        sig = np.repeat(vals, h, axis=0)[:steps]
        if rng.random() < 0.5:
            lo, hi = np.sort(rng.integers(0, steps, size=2))
            hi = max(hi, lo + 1)
            mask = np.zeros(steps)
            mask[lo:hi] = 1.0
            sig = sig * mask[:, None]
        energy = dt * float(np.sum(sig * sig))
        if energy == 0.0:
            sig[0] = 1.0
            energy = dt
        out[r] = sig / np.sqrt(energy)
    return out
