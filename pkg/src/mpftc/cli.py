"""Command line entry point: ``mpftc run | synth | validate | list``.

Exit codes: 0 ok, 2 configuration error, 3 an expectation failed,
4 numerical failure.  Outputs go below ``$MPFTC_OUTPUT_ROOT`` (default
``./runs``) unless ``--out`` is given.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np

from .config import load_config, read_stub, write_effective_config
from .core import ConfigurationError, IntegrationError, PropertyFailure, SynthesisError
from .sim import (Scenario, build_controller, evaluate_expectations, monitor_lyapunov, monitor_safety,
                  run_closed_loop)
from .terminal import (BoundLedger, DoubleIntegratorTail, TerminalSynthesisResult, explicit_terminal_slice,
                       synthesize_double_integrator_lqr, synthesize_robot_terminal)

log = logging.getLogger("mpftc")

EXIT_OK, EXIT_CONFIG, EXIT_ACCEPT, EXIT_NUMERIC = 0, 2, 3, 4

# published values used by the synth comparison report
ROBOT_PUBLISHED = {"K1": 0.31, "K2": 0.85, "gamma_star": 2.29e7,
                   "P11": 6.51e6, "P13": 5.27e6, "P33": 6.16e6}


def output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("MPFTC_OUTPUT_ROOT", "runs"))


# -- run -------------------------------------------------------------------------------


def write_plot_data(path: Path, sc: Scenario, lg, ref) -> Path:
    """Trajectory table with the reference at ``tau`` and at wall-clock time."""
    nx = lg.n_x
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        n_obs = len(lg.obstacle_w[0]) if lg.obstacle_w else 0
        obs_cols = [f"w{j}_{i}" for j in range(n_obs) for i in range(len(lg.obstacle_w[0][j]))]
        wr.writerow(["t", "tau"] + [f"x{i}" for i in range(nx)] + [f"rx_tau{i}" for i in range(nx)]
                    + [f"rx_t{i}" for i in range(nx)] + [f"u{i}" for i in range(lg.n_u)] + ["v", "stage"]
                    + obs_cols)
        for k in range(len(lg)):
            t, tau = lg.t[k], lg.tau[k]
            w = [c for ob in lg.obstacle_w[k] for c in ob]
            wr.writerow([t, tau] + list(lg.x[k]) + ref.state(tau).tolist() + ref.state(t).tolist()
                        + list(lg.u[k]) + [lg.v[k], lg.stage[k]] + w)
    return path


def write_slices(outdir: Path, sc: Scenario, spec: dict) -> list[Path]:
    """Explicit terminal-set slices of the double-integrator example."""
    tail = DoubleIntegratorTail.default(t_s=sc.t_s, steps=(sc.M or sc.N) - sc.N,
                                        v_r=float(sc.reference.get("v_r", 4.0)))
    res = int(spec.get("resolution", 201))
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for tau in spec.get("tau", [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]):
        sl = explicit_terminal_slice(tail, float(tau), tuple(spec.get("dp_range", (-10.0, 10.0))),
                                     tuple(spec.get("pd_range", (0.0, 5.0))), res)
        p = outdir / f"slice_tau_{float(tau):.3f}.csv"
        with p.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["dp", "pd", "inside"])
            for i, pd in enumerate(sl.pd):
                for j, dp in enumerate(sl.dp):
                    wr.writerow([f"{dp:.10g}", f"{pd:.10g}", int(sl.mask[i, j])])
        paths.append(p)
    return paths


def run_scenario(sc: Scenario, outdir: Path, base_dir: Path, slices: dict | None = None) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    write_effective_config(sc, outdir / "effective_config.toml")
    t0 = time.perf_counter()
    ctl = build_controller(sc, base_dir)
    lg = run_closed_loop(sc, base_dir, controller=ctl)
    wall = time.perf_counter() - t0
    if not np.all(np.isfinite(lg.array("x"))):
        raise IntegrationError(f"{sc.name}: non-finite state in the closed loop")
    lg.write_csv(outdir / "log.csv")
    lg.write_json(outdir / "log.json")
    write_plot_data(outdir / "trajectory.csv", sc, lg, ctl.ref)
    checks = evaluate_expectations(sc, lg, ctl.model, ctl.ref, wall)
    report = {
        "scenario": sc.name,
        "mode": sc.mode,
        "wall_time_s": wall,
        "safety": monitor_safety(lg, ctl.spec.solver.feas_tol).to_dict(),
        "lyapunov": monitor_lyapunov(lg, ctl.spec.solver.opt_tol).to_dict(),
        "checks": [{"name": c.name, "ok": bool(c.ok), "value": c.value, "threshold": c.threshold}
                   for c in checks],
    }
    if slices:
        report["slices"] = [str(p.name) for p in write_slices(outdir / "slices", sc, slices)]
    (outdir / "report.json").write_text(json.dumps(report, indent=2, default=str))
    for c in checks:
        print(f"  {c.line()}")
    report["passed"] = all(c.ok for c in checks)
    return report


def cmd_run(args) -> int:
    cfg = Path(args.config)
    scenarios = load_config(cfg, args.only, args.override)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    root = output_root(args.out) / f"{stamp}-{cfg.stem}"
    base_dir = cfg.resolve().parent
    failed = False
    for sc in scenarios:
        print(f"[{sc.name}] mode={sc.mode} steps={sc.steps}")
        rep = run_scenario(sc, root / sc.name, base_dir, sc.slices or None)
        failed |= not rep["passed"]
    print(f"outputs: {root}")
    return EXIT_ACCEPT if failed else EXIT_OK


# -- synth -----------------------------------------------------------------------------


def robot_report(res: TerminalSynthesisResult) -> dict:
    K = np.asarray(res.K_eta)
    P = np.asarray(res.P_eta)
    got = {"K1": K[0, 0], "K2": K[0, 2] if K.shape[1] == 4 else K[0, 1], "gamma_star": res.gamma_star,
           "P11": P[0, 0], "P13": P[0, 2], "P33": P[2, 2]}
    return {k: {"computed": float(got[k]), "published": v, "rel_dev": float(got[k] / v - 1.0)}
            for k, v in ROBOT_PUBLISHED.items()}


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.target == "robot-appendix-b":
        res = synthesize_robot_terminal(BoundLedger(), args.ts or 0.03,
                                        discretisation=args.discretisation, norm=args.norm)
        res.save(out)
        rep = robot_report(res)
        rep["d1"], rep["d2"] = res.d1, res.d2
    else:
        K, P = synthesize_double_integrator_lqr(args.ts or 0.02)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps({"schema_version": 1, "target": args.target, "K": K.tolist(),
                                   "P": P.tolist()}, indent=2, sort_keys=True) + "\n")
        rep = {"K": K.tolist(), "P": P.tolist()}
    print(json.dumps(rep, indent=2))
    print(f"artifact: {out}")
    return EXIT_OK


# -- validate / list ---------------------------------------------------------------------


def cmd_validate(args) -> int:
    from .sim import build_model, build_ocp, build_reference

    for path in args.configs:
        cfg = Path(path)
        for sc in load_config(cfg, None, args.override):
            model = build_model(sc)
            build_ocp(sc, model, build_reference(sc), cfg.resolve().parent)
            print(f"ok {cfg.name}:{sc.name}")
    return EXIT_OK


def _config_files(paths) -> list[Path]:
    out = []
    for p in paths or ["scenarios"]:
        p = Path(p)
        out.extend(sorted(p.glob("*.toml")) if p.is_dir() else [p])
    return out


def cmd_list(args) -> int:
    for cfg in _config_files(args.paths):
        for sc in load_config(cfg):
            print(f"{cfg.name}:{sc.name}\tmodel={sc.model}\tmode={sc.mode}\tN={sc.N}\tM={sc.M}\tt_s={sc.t_s}")
        if read_stub(cfg):
            print(f"{cfg.name}:mpfc_stub\t(reference tuning only, not runnable)")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpftc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run the scenarios of a config file")
    r.add_argument("config")
    r.add_argument("--only", action="append", default=[], help="scenario name (repeatable)")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", help="output root (default $MPFTC_OUTPUT_ROOT or ./runs)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="terminal ingredient synthesis")
    s.add_argument("target", choices=["robot-appendix-b", "double-integrator-lqr"])
    s.add_argument("--out", required=True)
    s.add_argument("--ts", type=float)
    s.add_argument("--discretisation", default="closed-loop-exact", choices=["closed-loop-exact", "zoh", "euler"])
    s.add_argument("--norm", default="inf", choices=["inf", "2"])
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("validate", help="parse configs and build the problems without solving")
    v.add_argument("configs", nargs="+")
    v.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    v.set_defaults(func=cmd_validate)

    ls = sub.add_parser("list", help="list scenarios")
    ls.add_argument("paths", nargs="*")
    ls.set_defaults(func=cmd_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SynthesisError as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IntegrationError, PropertyFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
