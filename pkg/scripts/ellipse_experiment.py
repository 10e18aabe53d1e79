"""Invariant ellipses for nu = 0..3 and worst-case trajectories at the worst parameter value.

Writes ellipse_nu<k>.csv, worst_<k>.csv and summary.json to --out; with
--plot (needs matplotlib) also ellipses.png.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from iqcdiss import cli, sim
from iqcdiss.analysis import ellipse_boundary_points, robust_ellipsoid_analysis, worst_case_excursions


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "example.json"))
    ap.add_argument("--out", default="results/ellipses")
    ap.add_argument("--delta", type=float, default=-0.6, help="parameter value for the worst-case runs")
    ap.add_argument("--directions", type=int, default=5)
    ap.add_argument("--plot", action="store_true")
    args = ap.parse_args()

    cfg = cli.load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"traces": {}, "solve_seconds": {}}
    ys = {}
    for nu in cfg.nu_list:
        t0 = time.perf_counter()
        bundle, report = robust_ellipsoid_analysis(cfg.plant, cfg.interval, nu, cfg.analysis_options)
        summary["solve_seconds"][nu] = time.perf_counter() - t0
        summary["traces"][nu] = report.trace
        ys[nu] = bundle.y
        theta, pts = ellipse_boundary_points(bundle.y)
        cli.write_csv(out / f"ellipse_nu{nu}.csv", ["theta", "e1", "e2"], np.column_stack([theta, pts]))
        print(f"nu={nu}: trace(Y) = {report.trace:.6g}  ({summary['solve_seconds'][nu]:.2f} s)")

    nu_top = max(cfg.nu_list)
    dt, horizon = cfg.sim.dt, cfg.sim.horizon
    res = worst_case_excursions(cfg.plant, args.delta, ys[nu_top], args.directions, horizon, dt)
    cl = sim.closed_loop(cfg.plant, args.delta)
    trajs = []
    for k, ang in enumerate(res["angles"]):
        d = sim.worst_case_disturbance(cfg.plant, args.delta, [np.cos(ang), np.sin(ang)], horizon, dt).d
        tr = sim.simulate_zoh(cl, d, dt)
        e = tr["x"] @ cfg.plant.c_e.T
        trajs.append(e)
        cli.write_csv(out / f"worst_{k}.csv", ["t", "e1", "e2"], np.column_stack([tr.t, e]))
    summary["worst_case"] = {"delta": args.delta, "nu": nu_top, "angles": res["angles"].tolist(),
                             "max_ratio": res["max_ratio"].tolist(),
                             "boundary_mismatch": res["boundary_mismatch"].tolist()}
    print(f"worst-case max e'Y^-1 e at delta={args.delta}: " + ", ".join(f"{r:.4f}" for r in res["max_ratio"]))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 5))
        for nu, y in ys.items():
            pts = ellipse_boundary_points(y, 512)[1]
            ax.plot(pts[:, 0], pts[:, 1], label=f"nu={nu}")
        for e in trajs:
            ax.plot(e[:, 0], e[:, 1], "k", lw=0.6)
        ax.set_xlabel("e1")
        ax.set_ylabel("e2")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "ellipses.png", dpi=150)


if __name__ == "__main__":
    main()
