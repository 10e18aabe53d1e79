"""Command-line front end: JSON configuration in, certificates and plot data out.

Subcommands ``analyze``, ``verify``, ``simulate`` and ``factorize``. Exit codes:
0 success, 1 configuration or usage error, 2 infeasible LMIs, 3 numerical
failure, 4 a verification check failed. ``IQC_LOG`` selects the log level
(``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, riccati, sim
from .lmi import structured_Z
from .sdp import SolverOptions
from .statespace import (
    EXAMPLE_INTERVAL, Interval, UncertainPlant, cascade, example_plant, multiplier_filter, parametric_T,
    psi_basis, static,
)

log = logging.getLogger("iqcdiss")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
TOL_CHECK = 1e-5
N_WORST_DIRS = 5


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


PLANT_KEYS = ("a", "b_w", "b_d", "c_z", "d_zw", "d_zd", "c_e")


@dataclass
class AnalysisConfig:
    plant: UncertainPlant
    interval: Interval
    nu_list: list
    eps_margin: float = 1e-6
    solver: SolverOptions = field(default_factory=SolverOptions)
    sim: analysis.SimOptions = field(default_factory=analysis.SimOptions)
    multiplier_p: np.ndarray | None = None

    @property
    def analysis_options(self) -> analysis.AnalysisOptions:
        return analysis.AnalysisOptions(eps_margin=self.eps_margin, solver=self.solver)


def _check_keys(obj, allowed, required, path):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"{path + '.' if path else ''}{k}: unknown key")
    for k in required:
        if k not in obj:
            raise ConfigError(f"{path + '.' if path else ''}{k}: missing")


def _number(v, path, integer=False, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    if integer and not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer")
    if not math.isfinite(v):
        raise ConfigError(f"{path}: must be finite")
    if positive and v <= 0:
        raise ConfigError(f"{path}: must be positive")
    return v


def _matrix(v, path, rows=None, cols=None) -> np.ndarray:
    if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
        raise ConfigError(f"{path}: expected a non-empty list of rows")
    widths = {len(r) for r in v}
    if len(widths) != 1:
        raise ConfigError(f"{path}: rows have different lengths {sorted(widths)}")
    for i, r in enumerate(v):
        for j, x in enumerate(r):
            _number(x, f"{path}[{i}][{j}]")
    m = np.array(v, dtype=float)
    if rows is not None and m.shape[0] != rows:
        raise ConfigError(f"{path}: expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ConfigError(f"{path}: expected {cols} columns, got {m.shape[1]}")
    return m


def parse_plant(obj, path="plant") -> UncertainPlant:
    _check_keys(obj, PLANT_KEYS, PLANT_KEYS, path)
    a = _matrix(obj["a"], f"{path}.a")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ConfigError(f"{path}.a: expected a square matrix, got {a.shape[0]}x{a.shape[1]}")
    b_w = _matrix(obj["b_w"], f"{path}.b_w", rows=n)
    b_d = _matrix(obj["b_d"], f"{path}.b_d", rows=n)
    c_z = _matrix(obj["c_z"], f"{path}.c_z", cols=n)
    c_e = _matrix(obj["c_e"], f"{path}.c_e", cols=n)
    nz = c_z.shape[0]
    d_zw = _matrix(obj["d_zw"], f"{path}.d_zw", rows=nz, cols=b_w.shape[1])
    d_zd = _matrix(obj["d_zd"], f"{path}.d_zd", rows=nz, cols=b_d.shape[1])
    return UncertainPlant(a, b_w, b_d, c_z, d_zw, d_zd, c_e)


def parse_config(obj) -> AnalysisConfig:
    _check_keys(obj, ("plant", "delta", "nu_list", "solver", "sim", "multiplier"), ("plant", "delta", "nu_list"), "")
    plant = parse_plant(obj["plant"])
    _check_keys(obj["delta"], ("min", "max"), ("min", "max"), "delta")
    lo = _number(obj["delta"]["min"], "delta.min")
    hi = _number(obj["delta"]["max"], "delta.max")
    if lo > hi:
        raise ConfigError("delta: min exceeds max")
    nu_list = obj["nu_list"]
    if not isinstance(nu_list, list) or not nu_list:
        raise ConfigError("nu_list: expected a non-empty list")
    for i, nu in enumerate(nu_list):
        _number(nu, f"nu_list[{i}]", integer=True)
        if nu < 0:
            raise ConfigError(f"nu_list[{i}]: must be nonnegative")
    if len(set(nu_list)) != len(nu_list):
        raise ConfigError("nu_list: duplicate entries")
    cfg = AnalysisConfig(plant, Interval(float(lo), float(hi)), list(nu_list))

    sv = obj.get("solver", {})
    _check_keys(sv, ("eps_margin", "tol_feas", "tol_gap", "max_iter"), (), "solver")
    if "eps_margin" in sv:
        cfg.eps_margin = float(_number(sv["eps_margin"], "solver.eps_margin", positive=True))
    for k in ("tol_feas", "tol_gap"):
        if k in sv:
            setattr(cfg.solver, k, float(_number(sv[k], f"solver.{k}", positive=True)))
    if "max_iter" in sv:
        cfg.solver.max_iter = _number(sv["max_iter"], "solver.max_iter", integer=True, positive=True)

    so = obj.get("sim", {})
    _check_keys(so, ("dt", "horizon", "n_random_runs", "seed"), (), "sim")
    for k in ("dt", "horizon"):
        if k in so:
            setattr(cfg.sim, k, float(_number(so[k], f"sim.{k}", positive=True)))
    if "n_random_runs" in so:
        cfg.sim.n_random_runs = _number(so["n_random_runs"], "sim.n_random_runs", integer=True, positive=True)
    if "seed" in so:
        cfg.sim.seed = _number(so["seed"], "sim.seed", integer=True)
    if cfg.sim.horizon < cfg.sim.dt:
        raise ConfigError("sim.horizon: shorter than one step")

    if "multiplier" in obj:
        mp = obj["multiplier"]
        _check_keys(mp, ("p",), ("p",), "multiplier")
        p = _matrix(mp["p"], "multiplier.p")
        if p.shape[0] != p.shape[1]:
            raise ConfigError("multiplier.p: expected a square matrix")
        cfg.multiplier_p = p
    return cfg


def load_json(path, what) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{what}: cannot read {path}: {exc.strerror}") from None
    if not text.strip():
        raise ConfigError(f"{what}: {path} is empty")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what}: {path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None


def load_config(path) -> AnalysisConfig:
    return parse_config(load_json(path, "config"))


def plant_to_dict(plant: UncertainPlant) -> dict:
    return {k: getattr(plant, k).tolist() for k in PLANT_KEYS}


def example_config() -> dict:
    return {
        "plant": plant_to_dict(example_plant()),
        "delta": {"min": EXAMPLE_INTERVAL.alpha, "max": EXAMPLE_INTERVAL.beta},
        "nu_list": [0, 1, 2, 3],
        "solver": {"eps_margin": 1e-6, "tol_feas": 1e-8, "tol_gap": 1e-8, "max_iter": 200},
        "sim": {"dt": 1e-3, "horizon": 30.0, "n_random_runs": 1000, "seed": 42},
    }


# --------------------------------------------------------------------------
# output


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (list, dict)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (pad + json.dumps(k) + ": " + _encode(v, indent, level + 1) for k, v in obj.items())
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with every float written to 17 significant digits (non-finite as null)."""
    return _encode(_plain(obj), indent, 0) + "\n"


def write_json(path: Path, obj):
    path.write_text(dumps(obj))
    log.info("wrote %s", path)


def write_csv(path: Path, header, rows):
    lines = [",".join(header)]
    for r in np.asarray(rows, dtype=float):
        lines.append(",".join(format(float(v), ".17g") for v in r))
    path.write_text("\n".join(lines) + "\n")
    log.info("wrote %s", path)


# --------------------------------------------------------------------------
# commands


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def cmd_analyze(cfg: AnalysisConfig, out: Path) -> dict:
    bundles, traces = [], {}
    for nu in cfg.nu_list:
        try:
            bundle, report = analysis.robust_ellipsoid_analysis(cfg.plant, cfg.interval, nu, cfg.analysis_options)
        except analysis.AnalysisError as exc:
            code = EXIT_INFEASIBLE if exc.status == "infeasible" else EXIT_NUMERICAL
            raise CommandError(code, f"nu={nu}: {exc}") from None
        except sim.WellPosednessError as exc:
            raise CommandError(EXIT_CONFIG, f"delta: {exc}") from None
        bundles.append(bundle.to_dict())
        traces[str(nu)] = report.trace
        theta, pts = analysis.ellipse_boundary_points(bundle.y, analysis.AnalysisOptions().boundary_points)
        write_csv(out / f"ellipse_nu{nu}.csv", ["theta", "e1", "e2"], np.column_stack([theta, pts]))
        log.info("nu=%d: trace(Y) = %.10g", nu, report.trace)
    certs = {"delta": {"min": cfg.interval.alpha, "max": cfg.interval.beta},
             "eps_margin": cfg.eps_margin, "traces": traces, "bundles": bundles}
    write_json(out / "certificates.json", certs)
    return certs


def load_certificates(path) -> list:
    data = load_json(path, "certificates")
    if not isinstance(data, dict) or not isinstance(data.get("bundles"), list) or not data["bundles"]:
        raise ConfigError(f"certificates: {path} has no bundles")
    out = []
    for i, b in enumerate(data["bundles"]):
        try:
            out.append(analysis.CertificateBundle.from_dict(b))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"certificates: bundles[{i}]: {exc}") from None
    return out


def verify_bundle(cfg: AnalysisConfig, bundle: analysis.CertificateBundle) -> dict:
    """All checks for one bundle; each entry has ``passed`` and the measured values."""
    plant, interval = cfg.plant, cfg.interval
    psiT = cascade(multiplier_filter(bundle.nu), static(parametric_T(interval, plant.n_z)))
    checks = {}

    margins = analysis.certificate_margins(plant, interval, bundle, cfg.eps_margin)
    checks["lmi_margins"] = {"values": margins,
                             "passed": all(v["residual"] >= -0.5 * v["margin"] for v in margins.values())}

    fdi = analysis.fdi_sample_check(psiT, bundle.m, plant.g())
    checks["fdi_max_eig"] = {"value": fdi, "passed": fdi < 0}

    pos = {"convex": analysis.positivity_check(bundle.xcal, bundle.z_tilde)}
    if bundle.k_are is not None:
        pos["are"] = analysis.positivity_check(bundle.xcal, riccati.terminal_cost_from_K(bundle.k_are).z)
    checks["positivity"] = {"values": pos, "passed": all(v > 0 for v in pos.values())}

    iqc = {}
    for name, k in (("convex", bundle.k), ("are", bundle.k_are)):
        if k is None:
            continue
        m = analysis.iqc_margins(bundle.nu, bundle.p, k, interval, n_pairs=100, horizon=10.0,
                                 dt=cfg.sim.dt, seed=cfg.sim.seed)
        iqc[name] = float(m.min())
    checks["iqc_margins"] = {"values": iqc, "passed": all(v >= -TOL_CHECK for v in iqc.values())}

    rand = analysis.validate_certificates(plant, interval, bundle, cfg.sim)
    sim_checks = rand["checks"]
    diss = sim_checks.get("dissipation")
    checks["dissipation"] = {
        "n_runs": rand["n_runs"],
        "gamma": bundle.gamma,
        "worst_relative_margin": None if diss is None else diss["worst_relative_margin"],
        "violations": None if diss is None else diss["violations"],
        "passed": diss is not None and diss["violations"] == 0,
    }
    for name in ("iqc_convex", "iqc_are"):
        if name in sim_checks:
            checks[f"loop_{name}"] = dict(sim_checks[name], passed=sim_checks[name]["violations"] == 0)

    worst = []
    wc_violations = 0
    for delta in sorted({interval.alpha, interval.beta}):
        try:
            wc = analysis.worst_case_excursions(plant, delta, bundle.y, N_WORST_DIRS, cfg.sim.horizon, cfg.sim.dt)
        except (ValueError, np.linalg.LinAlgError) as exc:
            worst.append({"delta": delta, "error": str(exc)})
            continue
        wc_violations += int(np.sum(wc["max_ratio"] > 1.0 + TOL_CHECK))
        worst.append({"delta": delta, "max_ratio": wc["max_ratio"]})
    inv = sim_checks["invariance"]
    checks["containment"] = {
        "random_violations": inv["violations"],
        "worst_case_violations": wc_violations,
        "violations": inv["violations"] + wc_violations,
        "worst_relative_margin": inv["worst_relative_margin"],
        "worst_case": worst,
        "passed": inv["violations"] + wc_violations == 0,
    }
    return checks


def cmd_verify(cfg: AnalysisConfig, certs_path, out: Path) -> dict:
    bundles = load_certificates(certs_path)
    report = {"seed": cfg.sim.seed, "n_random_runs": cfg.sim.n_random_runs, "nu": {}}
    failed = []
    for b in bundles:
        if b.xcal.shape[0] != 2 * b.nu + cfg.plant.n or b.y.shape[0] != cfg.plant.n_e:
            raise ConfigError(f"certificates: nu={b.nu} does not match the configured plant")
        checks = verify_bundle(cfg, b)
        report["nu"][str(b.nu)] = checks
        failed += [f"nu={b.nu}:{name}" for name, c in checks.items() if not c["passed"]]
    report["failed"] = failed
    report["passed"] = not failed
    write_json(out / "verify_report.json", report)
    if failed:
        raise CommandError(EXIT_CHECK, "checks failed: " + ", ".join(failed))
    return report


def _tag(delta, angle) -> str:
    def clean(x):
        return format(x, ".6g").replace("-", "m").replace(".", "p")

    return f"delta{clean(delta)}" + ("_zero" if angle is None else f"_angle{clean(angle)}")


def cmd_simulate(cfg: AnalysisConfig, delta: float, angle: float | None, horizon: float | None,
                 out: Path, tag: str | None = None) -> Path:
    """Worst-case trajectory for the direction ``(cos angle, sin angle)`` (``angle=None`` gives ``d = 0``)."""
    if not cfg.interval.contains(delta):
        raise ConfigError(f"--delta: {delta} outside [{cfg.interval.alpha}, {cfg.interval.beta}]")
    plant = cfg.plant
    horizon = cfg.sim.horizon if horizon is None else horizon
    dt = cfg.sim.dt
    if not horizon >= dt:
        raise ConfigError("--horizon: shorter than one step")
    steps = int(round(horizon / dt))
    try:
        cl = sim.closed_loop(plant, delta)
        if angle is None:
            d = np.zeros((steps, plant.n_d))
        else:
            d = sim.worst_case_disturbance(plant, delta, [math.cos(angle), math.sin(angle)], horizon, dt).d
    except sim.WellPosednessError as exc:
        raise ConfigError(f"--delta: {exc}") from None
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise CommandError(EXIT_NUMERICAL, f"worst-case synthesis failed: {exc}") from None
    n, nd = plant.n, plant.n_d
    qd = np.zeros((n + nd, n + nd))
    qd[n:, n:] = np.eye(nd)
    tr = sim.simulate_zoh(cl, d, dt, forms={"energy": qd})
    ch = sim.loop_channels(plant)
    y = tr["y"]
    cols = [tr.t[:, None], tr["u"], y[:, ch["z"]], y[:, ch["w"]], y[:, ch["e"]], tr["int_energy"]]
    header = (["t"] + [f"d{i + 1}" if nd > 1 else "d" for i in range(nd)]
              + [f"z{i + 1}" if plant.n_z > 1 else "z" for i in range(plant.n_z)]
              + [f"w{i + 1}" if plant.n_w > 1 else "w" for i in range(plant.n_w)]
              + [f"e{i + 1}" for i in range(plant.n_e)] + ["energy"])
    path = out / f"traj_{tag or _tag(delta, angle)}.csv"
    write_csv(path, header, np.hstack(cols))
    return path


def factorize_one(nu: int, p) -> dict:
    psi = multiplier_filter(nu)
    basis = psi_basis(nu)
    p = np.asarray(p, dtype=float)
    k = riccati.solve_nonsym_are(basis, basis, p)
    res, scale = riccati.nonsym_are_residual(basis, basis, p, k)
    left, right = riccati.nonsym_are_spectra(basis, basis, p, k)
    m = structured_Z(p)
    fac = riccati.canonical_factor(psi, m, riccati.terminal_cost_from_K(k).z)
    dev = riccati.verify_factorization(psi, m, fac, analysis.default_grid())

    def spec(ev):
        ev = np.sort_complex(np.asarray(ev, dtype=complex))
        return {"real": ev.real, "imag": ev.imag}

    return {"nu": nu, "k": k, "residual": res, "scale": scale,
            "spectra": {"left": spec(left), "right": spec(right)}, "grid_deviation": dev,
            "identity_residual": riccati.factorization_identity_residual(psi, m, fac)}


def cmd_factorize(cfg: AnalysisConfig, certs_path, out: Path) -> dict:
    if cfg.multiplier_p is not None:
        items = [(cfg.multiplier_p.shape[0] - 1, cfg.multiplier_p)]
    else:
        items = [(b.nu, b.p) for b in load_certificates(certs_path)]
    results = []
    for nu, p in items:
        try:
            results.append(factorize_one(nu, p))
        except (riccati.RiccatiError, np.linalg.LinAlgError) as exc:
            raise CommandError(EXIT_NUMERICAL, f"nu={nu}: Riccati equation failed: {exc}") from None
    report = {"factorizations": results}
    write_json(out / "factorization.json", report)
    return report


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="iqcdiss", description="Robust invariant-ellipsoid analysis with dynamic multipliers.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("config", help="JSON configuration file")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")

    p = sub.add_parser("analyze", help="solve the LMIs for every nu; write certificates.json and ellipse CSVs")
    common(p)
    p = sub.add_parser("verify", help="check stored certificates; write verify_report.json")
    common(p)
    p.add_argument("certificates", help="certificates.json written by analyze")
    p = sub.add_parser("simulate", help="worst-case trajectory; write traj_<tag>.csv")
    common(p)
    p.add_argument("--delta", type=float, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--direction-angle", type=float, help="direction of e(T) in radians")
    g.add_argument("--zero-input", action="store_true", help="simulate with d = 0")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--tag", default=None, help="file name tag (default derived from delta and angle)")
    p = sub.add_parser("factorize", help="non-symmetric Riccati factorization; write factorization.json")
    common(p)
    p.add_argument("--certificates", default=None, help="certificates.json (default: <out>/certificates.json)")
    p = sub.add_parser("example-config", help="print the bundled example configuration")
    return ap


def _setup_logging():
    level = os.environ.get("IQC_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"IQC_LOG: expected one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        if args.command == "example-config":
            sys.stdout.write(json.dumps(example_config(), indent=2) + "\n")
            return EXIT_OK
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "analyze":
            cmd_analyze(cfg, out)
        elif args.command == "verify":
            cmd_verify(cfg, args.certificates, out)
        elif args.command == "simulate":
            angle = None if args.zero_input else args.direction_angle
            cmd_simulate(cfg, args.delta, angle, args.horizon, out, args.tag)
        elif args.command == "factorize":
            certs = args.certificates or out / "certificates.json"
            cmd_factorize(cfg, certs, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
