"""Affine matrix expressions over a flat decision vector and the LMIs built from them.

An :class:`Affine` is ``const + sum_i x_i * coeffs[i]``. Products with constant
matrices, transposes and block assembly keep expressions affine, which is all the
KYP-type inequalities need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .statespace import (
    Interval,
    Realization,
    UncertainPlant,
    cascade,
    inverse_graph,
    multiplier_filter,
    parametric_T,
    psi_basis,
    stack_J,
    static,
)

SYM_TOL = 1e-12


class Affine:
    """Matrix-valued affine function of the decision vector."""

    __array_priority__ = 100

    def __init__(self, const, coeffs=None, nvars: int | None = None):
        const = np.atleast_2d(np.asarray(const, dtype=float))
        if coeffs is None:
            coeffs = np.zeros((nvars or 0,) + const.shape)
        self.const = const
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape[1:] != const.shape:
            raise ValueError("coefficient/constant shape mismatch")

    @property
    def shape(self):
        return self.const.shape

    @property
    def nvars(self):
        return self.coeffs.shape[0]

    @property
    def T(self) -> "Affine":
        return Affine(self.const.T, self.coeffs.transpose(0, 2, 1))

    def value(self, x) -> np.ndarray:
        return self.const + np.tensordot(np.asarray(x, dtype=float), self.coeffs, axes=1)

    def _lift(self, other) -> "Affine":
        if isinstance(other, Affine):
            if other.nvars != self.nvars:
                raise ValueError("expressions live on different layouts")
            return other
        return Affine(other, nvars=self.nvars)

    def __add__(self, other):
        o = self._lift(other)
        return Affine(self.const + o.const, self.coeffs + o.coeffs)

    __radd__ = __add__

    def __neg__(self):
        return Affine(-self.const, -self.coeffs)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, scalar):
        return Affine(self.const * scalar, self.coeffs * scalar)

    __rmul__ = __mul__

    def __matmul__(self, mat):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return Affine(self.const @ mat, self.coeffs @ mat)

    def __rmatmul__(self, mat):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        return Affine(mat @ self.const, np.einsum("ij,kjl->kil", mat, self.coeffs))

    def congruence(self, L) -> "Affine":
        """``L^T (self) L``."""
        L = np.atleast_2d(np.asarray(L, dtype=float))
        return L.T @ self @ L

    def is_symmetric(self, tol: float = SYM_TOL) -> bool:
        if self.shape[0] != self.shape[1]:
            return False
        return (np.abs(self.const - self.const.T).max(initial=0.0) <= tol
                and np.abs(self.coeffs - self.coeffs.transpose(0, 2, 1)).max(initial=0.0) <= tol)

    def sym(self) -> "Affine":
        return Affine(0.5 * (self.const + self.const.T),
                      0.5 * (self.coeffs + self.coeffs.transpose(0, 2, 1)))

    def __getitem__(self, idx):
        return Affine(self.const[idx], self.coeffs[(slice(None),) + tuple(np.index_exp[idx])])

    def __repr__(self):
        return f"Affine(shape={self.shape}, nvars={self.nvars})"


def bmat(blocks, nvars: int) -> Affine:
    """Block assembly of affine expressions and constant arrays."""
    rows = []
    for row in blocks:
        rows.append([b if isinstance(b, Affine) else Affine(b, nvars=nvars) for b in row])
    const = np.block([[b.const for b in row] for row in rows])
    coeffs = np.concatenate(
        [np.concatenate([b.coeffs for b in row], axis=2) for row in rows], axis=1)
    return Affine(const, coeffs)


def block_diag(*blocks, nvars: int) -> Affine:
    blocks = [b if isinstance(b, Affine) else Affine(b, nvars=nvars) for b in blocks]
    grid = [[b if i == j else np.zeros((b.shape[0], c.shape[1])) for j, c in enumerate(blocks)]
            for i, b in enumerate(blocks)]
    return bmat(grid, nvars)


@dataclass(frozen=True)
class VarBlock:
    name: str
    kind: str  # "sym", "general" or "scalar"
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        if self.kind == "sym":
            s = self.shape[0]
            return s * (s + 1) // 2
        return int(np.prod(self.shape))


@dataclass
class VarLayout:
    """Ordered decision-variable blocks partitioning ``[0, N)``.

    Symmetric blocks are stored as the lower triangle in row-major order, with
    basis ``E_ii`` on the diagonal and ``E_ij + E_ji`` off it.
    """

    blocks: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def _add(self, name, kind, shape):
        if any(b.name == name for b in self.blocks):
            raise ValueError(f"duplicate variable {name!r}")
        self.blocks.append(VarBlock(name, kind, tuple(shape), self.size))

    def add_sym(self, name, s):
        self._add(name, "sym", (s, s))
        return self

    def add_general(self, name, r, c):
        self._add(name, "general", (r, c))
        return self

    def add_scalar(self, name):
        self._add(name, "scalar", (1, 1))
        return self

    def block(self, name) -> VarBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def expr(self, name) -> Affine:
        """The variable as an affine expression over the full layout."""
        blk = self.block(name)
        N = self.size
        r, c = blk.shape
        coeffs = np.zeros((N, r, c))
        k = blk.offset
        if blk.kind == "sym":
            for i in range(r):
                for j in range(i + 1):
                    coeffs[k, i, j] = 1.0
                    coeffs[k, j, i] = 1.0
                    k += 1
        else:
            for i in range(r):
                for j in range(c):
                    coeffs[k, i, j] = 1.0
                    k += 1
        return Affine(np.zeros((r, c)), coeffs)

    def value(self, name, x) -> np.ndarray:
        blk = self.block(name)
        seg = np.asarray(x, dtype=float)[blk.offset: blk.offset + blk.size]
        r, c = blk.shape
        if blk.kind == "sym":
            out = np.zeros((r, r))
            out[np.tril_indices(r)] = seg
            return out + np.tril(out, -1).T
        return seg.reshape(r, c).copy()

    def pack(self, values: dict) -> np.ndarray:
        """Inverse of :meth:`value` for a full set of block values."""
        x = np.zeros(self.size)
        for blk in self.blocks:
            v = np.atleast_2d(np.asarray(values[blk.name], dtype=float)).reshape(blk.shape)
            if blk.kind == "sym":
                seg = v[np.tril_indices(blk.shape[0])]
            else:
                seg = v.ravel()
            x[blk.offset: blk.offset + blk.size] = seg
        return x

    def trace_objective(self, name) -> np.ndarray:
        c = np.zeros(self.size)
        blk = self.block(name)
        k = blk.offset
        for i in range(blk.shape[0]):
            for j in range(i + 1):
                if i == j:
                    c[k] = 1.0
                k += 1
        return c


@dataclass
class Constraint:
    """``expr >= margin*I`` (sense ``">"``) or ``expr <= -margin*I`` (sense ``"<"``)."""

    name: str
    expr: Affine
    sense: str
    margin: float = 0.0

    def __post_init__(self):
        if self.sense not in (">", "<"):
            raise ValueError(f"sense must be '>' or '<', got {self.sense!r}")
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ValueError("margin must be finite and nonnegative")
        if not self.expr.is_symmetric():
            raise ValueError(f"constraint {self.name!r} is not symmetric")

    @property
    def size(self):
        return self.expr.shape[0]

    def normalized(self) -> Affine:
        """The expression ``F`` with the constraint read as ``F >= 0``."""
        eye = np.eye(self.size)
        if self.sense == ">":
            return self.expr - self.margin * eye
        return -self.expr - self.margin * eye

    def residual(self, x) -> float:
        """Smallest eigenvalue of the normalized expression (``inf`` for empty blocks)."""
        if self.size == 0:
            return np.inf
        return float(np.linalg.eigvalsh(self.normalized().value(x))[0])


@dataclass
class SdpProblem:
    layout: VarLayout
    objective: np.ndarray
    constraints: list

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        N = self.layout.size
        if self.objective.shape != (N,):
            raise ValueError("objective length does not match layout")
        for c in self.constraints:
            if c.expr.nvars != N:
                raise ValueError(f"constraint {c.name!r} built on a different layout")

    def residuals(self, x) -> dict:
        return {c.name: c.residual(x) for c in self.constraints}


def margin_for(const, eps_margin: float) -> float:
    """Strictness margin scaled by the constant term."""
    return eps_margin * max(1.0, float(np.linalg.norm(const, 2)) if np.size(const) else 1.0)


def kyp_form(X, M, real: Realization | tuple, nvars: int | None = None) -> Affine:
    """``[I 0; A B; C D]^T diag([[0, X], [X, 0]], M) [I 0; A B; C D]``.

    ``X`` and ``M`` may be constant arrays or :class:`Affine` expressions.
    """
    if isinstance(real, Realization):
        a, b, c, d = real.abcd
    else:
        a, b, c, d = (np.atleast_2d(np.asarray(v, dtype=float)) for v in real)
    n, m = b.shape
    if a.shape != (n, n) or c.shape[1] != n or d.shape != (c.shape[0], m):
        raise ValueError("inconsistent realization blocks")
    if nvars is None:
        nvars = next((e.nvars for e in (X, M) if isinstance(e, Affine)), 0)
    X = X if isinstance(X, Affine) else Affine(np.reshape(X, (n, n)), nvars=nvars)
    M = M if isinstance(M, Affine) else Affine(M, nvars=nvars)
    if X.shape != (n, n) or M.shape != (c.shape[0], c.shape[0]):
        raise ValueError(f"kyp_form: X {X.shape}, M {M.shape} incompatible with n={n}, p={c.shape[0]}")
    top = np.hstack([np.eye(n), np.zeros((n, m))])
    mid = np.hstack([a, b])
    low = np.hstack([c, d])
    xpart = top.T @ X @ mid
    return (xpart + xpart.T + M.congruence(low)).sym()


def transform_realization(real: Realization, T, R, S, F) -> Realization:
    """``diag(T^{-1}, R^{-1}) [A B; C D] [[T, 0], [F, S]]`` for invertible ``T, R, S``.

    With ``L = [[T, 0], [F, S]]``,
    ``kyp_form(T'XT, R'MR, transformed) = L' kyp_form(X, M, real) L``.
    """
    a, b, c, d = real.abcd
    T, R, S, F = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (T, R, S, F))
    at = np.linalg.solve(T, a @ T + b @ F)
    bt = np.linalg.solve(T, b @ S)
    ct = np.linalg.solve(R, c @ T + d @ F)
    dt = np.linalg.solve(R, d @ S)
    return Realization(at, bt, ct, dt)


def structured_M(layout: VarLayout, pname: str = "P") -> Affine:
    """``[[0, P], [P^T, 0]]`` for the general block ``pname``."""
    P = layout.expr(pname)
    r, c = P.shape
    N = layout.size
    return bmat([[np.zeros((r, r)), P], [P.T, np.zeros((c, c))]], N)


def structured_Z(K, nvars: int | None = None):
    """``[[0, K], [K^T, 0]]`` for a constant or affine ``K``."""
    if isinstance(K, Affine):
        r, c = K.shape
        return bmat([[np.zeros((r, r)), K], [K.T, np.zeros((c, c))]], K.nvars)
    K = np.atleast_2d(np.asarray(K, dtype=float)) if np.size(K) else np.zeros((0, 0))
    r, c = K.shape
    return np.block([[np.zeros((r, r)), K], [K.T, np.zeros((c, c))]])


def filtered_graph(psi: Realization, g: Realization, T=None) -> Realization:
    """Realization of ``Psi T [G; I]`` with state ``col(xi, x)``."""
    outer = psi if T is None else cascade(psi, static(T))
    return cascade(outer, inverse_graph(g))


def assemble_fdi_lmi(filtered: Realization, X, M, eps_margin: float = 1e-6,
                     name: str = "fdi") -> Constraint:
    expr = kyp_form(X, M, filtered)
    return Constraint(name, expr, "<", margin_for(expr.const, eps_margin))


def gamma_realization(psi: Realization, plant: UncertainPlant, T=None) -> Realization:
    """Realization with input ``col(w, d)`` and output ``col(y, z, d)``.

    With ``b_d = 0`` and ``d_zd = I`` this is the loop ``z = G w + d``.
    """
    T = np.eye(psi.m) if T is None else np.asarray(T, dtype=float)
    g = plant.g()
    F = inverse_graph(g)
    nz, nd = plant.n_z, plant.n_d
    d_d = np.vstack([plant.d_zd, np.zeros((plant.n_w, nd))])
    BT = psi.b @ T
    DT = psi.d @ T
    a = np.block([[psi.a, BT @ F.c], [np.zeros((g.n, psi.n)), g.a]])
    b = np.block([[BT @ F.d, BT @ d_d], [g.b, plant.b_d]])
    c = np.block([[psi.c, DT @ F.c],
                  [np.zeros((nz, psi.n)), g.c],
                  [np.zeros((nd, psi.n + g.n))]])
    d = np.block([[DT @ F.d, DT @ d_d],
                  [g.d, plant.d_zd],
                  [np.zeros((nd, plant.n_w)), np.eye(nd)]])
    return Realization(a, b, c, d)


def assemble_gamma_lmi(xcal, m, psi: Realization, plant: UncertainPlant, gamma: float,
                       T=None) -> np.ndarray:
    """Numeric matrix of the dissipation LMI with supply ``y'My + |z|^2/gamma - gamma |d|^2``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    real = gamma_realization(psi, plant, T)
    nz, nd = plant.n_z, plant.n_d
    m = np.atleast_2d(np.asarray(m, dtype=float))
    mid = np.zeros((real.p, real.p))
    k = m.shape[0]
    if real.p != k + nz + nd:
        raise ValueError("middle matrix does not match the filter output")
    mid[:k, :k] = m
    mid[k:k + nz, k:k + nz] = np.eye(nz) / gamma
    mid[k + nz:, k + nz:] = -gamma * np.eye(nd)
    return kyp_form(np.asarray(xcal, dtype=float), mid, real).const


def example_layout(nu: int, n_e: int = 2, n_x: int = 4) -> VarLayout:
    lay = VarLayout()
    lay.add_general("P", nu + 1, nu + 1)
    lay.add_sym("X", 2 * nu + n_x)
    lay.add_sym("R", 2 * nu)
    lay.add_general("K", nu, nu)
    lay.add_sym("Y", n_e)
    return lay


def assemble_pn_lmis(psi: Realization, interval: Interval, g: Realization, layout: VarLayout,
                     eps_margin: float = 1e-6) -> tuple:
    """The positivity LMI on ``Psi J`` (sense ``>``) and the plant LMI on ``Psi T [G; I]``."""
    M = structured_M(layout)
    N = layout.size
    n_z = g.p
    psiJ = cascade(psi, static(stack_J(n_z)))
    pos = kyp_form(layout.expr("R"), M, psiJ, N)
    T = parametric_T(interval, n_z)
    plant_lmi = kyp_form(layout.expr("X"), M, filtered_graph(psi, g, T), N)
    return (Constraint("positivity", pos, ">", margin_for(pos.const, eps_margin)),
            Constraint("plant_fdi", plant_lmi, "<", margin_for(plant_lmi.const, eps_margin)))


def coupling_expr(layout: VarLayout, c_e) -> Affine:
    """``[[Y, 0, C_e], [0, X - diag(Z, 0)]]`` with ``Z = [[0, K], [K^T, 0]]``."""
    N = layout.size
    X = layout.expr("X")
    K = layout.expr("K")
    nxi = 2 * K.shape[0]
    Z = structured_Z(K)
    nx = X.shape[0] - nxi
    pad = bmat([[Z, np.zeros((nxi, nx))], [np.zeros((nx, nxi)), np.zeros((nx, nx))]], N)
    Y = layout.expr("Y")
    c_e = np.atleast_2d(c_e)
    side = np.hstack([np.zeros((c_e.shape[0], nxi)), c_e])
    return bmat([[Y, side], [side.T, X - pad]], N)


def assemble_example_lmis(plant: UncertainPlant, interval: Interval, nu: int,
                          eps_margin: float = 1e-6) -> SdpProblem:
    """Trace-of-``Y`` minimization certifying ``e(T)' Y^{-1} e(T) <= int |d|^2``."""
    if plant.n_z != plant.n_w:
        raise ValueError("parametric class needs n_z == n_w")
    if plant.n_z != 1:
        raise ValueError("basis multipliers are built for a scalar uncertainty channel")
    lay = example_layout(nu, plant.n_e, plant.n)
    N = lay.size
    psi = multiplier_filter(nu)
    g = plant.g()
    T = parametric_T(interval, plant.n_z)
    M = structured_M(lay)

    pos, _ = assemble_pn_lmis(psi, interval, g, lay, eps_margin)

    real = gamma_realization(psi, plant, T)
    # drop the z output row: supply is y'My - |d|^2
    k = psi.p
    keep = list(range(k)) + list(range(k + plant.n_z, real.p))
    real = Realization(real.a, real.b, real.c[keep], real.d[keep])
    mid = block_diag(M, -np.eye(plant.n_d), nvars=N)
    dis = kyp_form(lay.expr("X"), mid, real, N)

    coup = coupling_expr(lay, plant.c_e)
    R = lay.expr("R")
    K = lay.expr("K")
    rk = R - structured_Z(K)

    cons = [
        Constraint("dissipation", dis, "<", margin_for(dis.const, eps_margin)),
        Constraint("coupling", coup, ">", margin_for(coup.const, eps_margin)),
        Constraint("terminal", rk, "<", margin_for(rk.const, eps_margin)),
        pos,
    ]
    return SdpProblem(lay, lay.trace_objective("Y"), cons)
