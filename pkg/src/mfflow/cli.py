"""Command-line front end.

    mfflow run-fp      --config cfg.ini --out out/
    mfflow run-kernel  --scenario state-invariant-ref --out out/ --snapshot-every 100
    mfflow run-value   ...
    mfflow verify      ...
    mfflow convergence ...

Exit codes: 0 pass, 1 check failure, 2 numerical error, 3 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .coefficients import UnsupportedModelError
from .fp import SolverError, fmt, norm_report, solve_fp, write_density_csv, write_norm_csv, write_norm_summary
from .grid import OffMeshError
from .linearized import kernel_directional_discrepancy, solve_directional, solve_kernel
from .scenarios import CATALOG, ConfigError, Scenario, build, read_config
from .sde import EscapeError
from .value import dv_dmu, value_report
from .verification import (
    TARGETS,
    ConfigurationError,
    TimeWeighted,
    convergence_study,
    ito_residual,
    martingale_check,
    residual_refinement,
    slope_ok,
    terminal_condition_check,
    terminal_one_step,
)

EXIT_PASS, EXIT_FAIL, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 3


class _Out:
    """CSV writer that stamps every file with the same provenance comment."""

    def __init__(self, out_dir: Path, sc: Scenario):
        self.dir = out_dir
        self.header = f"version={__version__}, seed={sc.seed}, scenario={sc.name}"

    def open(self, name: str):
        return open(self.dir / name, "w", newline="")

    def table(self, name: str, columns, rows):
        with self.open(name) as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _scenario(args) -> Scenario:
    over = {}
    if args.seed is not None:
        over["mc"] = {"seed": args.seed}
    if args.config:
        secs = read_config(args.config)
        if args.scenario:
            secs.setdefault("scenario", {})["base"] = args.scenario
        return build(secs, **over)
    if args.scenario:
        return build(args.scenario, **over)
    raise ConfigError("give --config PATH or --scenario NAME")


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MF_THREADS")
    try:
        return int(env) if env else 1
    except ValueError as exc:
        raise ConfigError(f"MF_THREADS={env!r} is not an integer") from exc


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


# ---------------------------------------------------------------------------
# commands


def cmd_run_fp(sc: Scenario, out: _Out, args) -> int:
    path = solve_fp(sc.model, sc.mu, sc.t, sc.T, sc.value_config().fp(sc.t, sc.T), dt=sc.dt)
    rep = norm_report(path)
    with out.open("density_path.csv") as fh:
        write_density_csv(path, fh, out.header)
    with out.open("norm_report.csv") as fh:
        write_norm_csv(rep, fh, out.header)
    with out.open("norm_summary.csv") as fh:
        write_norm_summary(rep, fh, out.header)
    return EXIT_PASS


def cmd_run_kernel(sc: Scenario, out: _Out, args) -> int:
    fcfg = sc.value_config().fp(sc.t, sc.T)
    m_path = solve_fp(sc.model, sc.mu, sc.t, sc.T, fcfg, dt=sc.dt)
    _, _, k = solve_kernel(sc.model, m_path, fcfg, args.snapshot_every)
    x = sc.grid.nodes
    rows = []
    for pos, j in enumerate(k.stored_indices):
        for i in range(sc.grid.n_points):
            rows.append([float(k.times[j]), float(x[i])] + [float(v) for v in k.slices[pos, i]])
    out.table("kernel_slices.csv", ["s", "x"] + [f"y{i}" for i in range(sc.grid.n_points)], rows)
    disc = []
    for d in sc.directions:
        disc.append(kernel_directional_discrepancy(k, solve_directional(sc.model, m_path, d, fcfg), d))
    out.table(
        "kernel_discrepancy.csv",
        ["s"] + [f"direction{i}" for i in range(len(disc))],
        [[float(k.times[j])] + [float(c[p]) for c in disc] for p, j in enumerate(k.stored_indices)],
    )
    return EXIT_PASS


def cmd_run_value(sc: Scenario, out: _Out, args) -> int:
    cfg = sc.value_config(threads=_threads(args), snapshot_every=args.snapshot_every)
    rep = value_report(sc.model, sc.Phi, sc.t, sc.x0, sc.mu, cfg, sc.T)
    mud = dv_dmu(sc.model, sc.Phi, sc.t, sc.x0, sc.mu, cfg, sc.T, list(sc.directions))
    rows = [
        ["V", rep.v, rep.std_err],
        ["dV_dx", rep.dv_dx, ""],
        ["d2V_dx2", rep.d2v_dx2, ""],
        ["dV_dt", rep.dv_dt, ""],
    ]
    rows += [[f"dV_dmu_pair{i}", p.value, p.std_err] for i, p in enumerate(mud.pairings)]
    out.table("value_report.csv", ["quantity", "value", "std_err"], rows)
    if mud.function is not None:
        out.table("dv_dmu.csv", ["y", "dV_dmu"], zip(map(float, sc.grid.nodes), map(float, mud.function.values)))
    return EXIT_PASS


def _residual_level(sc: Scenario, k: int, n_points: int, n_steps: int, n_paths: int, threads: int):
    n = (n_points - 1) * 2**k + 1
    s = build(sc.sections, grid={"n_points": n}, time={"n_steps": n_steps * 2**k})
    cfg = s.value_config(n_paths=n_paths * 4**k, threads=threads, coarsen=2 if k == 0 else 1)
    return s.model, s.Phi, s.t, s.x0, s.mu, cfg, s.T


def cmd_verify(sc: Scenario, out: _Out, args) -> int:
    threads = _threads(args)
    cfg = sc.value_config(threads=threads)
    summary = []  # check, status, value, bound, detail

    def row(check, ok, value, bound, detail=""):
        summary.append([check, "PASS" if ok else "FAIL", float(value), float(bound), detail])

    gap = terminal_condition_check(sc.Phi, sc.x0, sc.mu)
    row("terminal_condition", gap == 0.0, gap, 0.0, "t=T")
    gap, env = terminal_one_step(sc.model, sc.Phi, sc.x0, sc.mu, cfg, sc.T)
    row("terminal_one_step", gap <= env, gap, env, "t=T-dt")

    res_rows = []
    if not sc.model.state_invariant:
        summary.append(["master_pde_residual", "SKIPPED", "", "", "kernel unavailable for x-dependent drift"])
    else:
        n_pts = int(sc.check("residual_n_points", 201))
        n_st = int(sc.check("residual_n_steps", 100))
        n_p = int(sc.check("residual_paths", 20000))
        rr = residual_refinement(lambda k: _residual_level(sc, k, n_pts, n_st, n_p, threads))
        ok = rr.coarse.passed and (rr.coarse.residual == 0.0 or rr.ratio >= 1.5)
        row("master_pde_residual", ok, rr.coarse.residual, rr.coarse.error_budget,
            f"refinement ratio {rr.ratio:.3g}" if math.isfinite(rr.ratio) else "exact zero")
        for lvl, r in (("reference", rr.coarse), ("refined", rr.fine)):
            res_rows.append([lvl, r.metadata["n_points"], r.metadata["dt"], r.metadata["n_paths"], r.residual,
                             r.error_budget, r.std_err] + [r.components[c] for c in sorted(r.components)])
        out.table("verify_residual.csv",
                  ["level", "n_points", "dt", "n_paths", "residual", "error_budget", "std_err"]
                  + sorted(rr.coarse.components), res_rows)

    cps = sc.check("checkpoints")
    checkpoints = _floats(cps) if cps else list(np.linspace(sc.t, sc.T, 5))
    mcfg = cfg.replace(n_paths=int(sc.check("martingale_paths", 2000)))
    mr = martingale_check(sc.model, sc.Phi, sc.t, sc.x0, sc.mu, checkpoints, mcfg, sc.T)

    def excess(i):
        d, e = abs(mr.drifts[i]), 3 * mr.std_errs[i]
        return d / e if e > 0 else (math.inf if d > 0 else 0.0)

    worst = max(range(len(checkpoints)), key=excess)
    row("martingale", mr.passed, mr.drifts[worst], 3 * mr.std_errs[worst], f"worst checkpoint s={checkpoints[worst]:.6g}")
    out.table("verify_martingale.csv", ["s", "M_s", "drift", "std_err"],
              [[float(s), m, d, e] for s, m, d, e in zip(checkpoints, mr.values, mr.drifts, mr.std_errs)])

    icfg = cfg.replace(n_paths=int(sc.check("ito_paths", sc.n_paths)))
    # a constant terminal functional is tested as itself, without time weight
    rate = 0.0 if sc.Phi.is_constant else float(sc.check("ito_rate", 0.5))
    f = TimeWeighted(sc.Phi, rate, sc.t)
    ir = ito_residual(sc.model, f, sc.t, sc.x0, sc.mu, icfg, sc.T)
    row("ito_residual", ir.passed, ir.mean, ir.bound, "exact zero" if ir.exact_zero else f"c_est {ir.c_est:.3g}")

    out.table("verify_summary.csv", ["check", "status", "value", "bound", "detail"], summary)
    failed = [r[0] for r in summary if r[1] == "FAIL"]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_PASS


def cmd_convergence(sc: Scenario, out: _Out, args) -> int:
    h = _floats(sc.check("h_values", "0.2, 0.1, 0.05, 0.025"))
    targets = [t.strip() for t in str(sc.check("targets", ",".join(TARGETS))).split(",") if t.strip()]
    errs, slopes, bad = [], [], []
    for target in targets:
        rep = convergence_study(target, sc, h)
        ok = slope_ok(rep)
        errs += [[target, float(hh), float(e)] for hh, e in zip(rep.h_values, rep.errors)]
        slopes.append([target, "" if rep.slope is None else float(rep.slope), str(rep.floor_limited).lower(),
                       "PASS" if ok else "FAIL"])
        if not ok:
            bad.append(f"{target} slope {rep.slope:.3g}")
    out.table("convergence_errors.csv", ["target", "h", "error"], errs)
    out.table("convergence_slopes.csv", ["target", "slope", "floor_limited", "status"], slopes)
    if bad:
        print("slopes outside [0.7, 1.3]: " + "; ".join(bad), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_PASS


COMMANDS = {
    "run-fp": cmd_run_fp,
    "run-kernel": cmd_run_kernel,
    "run-value": cmd_run_value,
    "verify": cmd_verify,
    "convergence": cmd_convergence,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfflow", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="sectioned key-value scenario file")
        s.add_argument("--scenario", help=f"catalog name ({', '.join(CATALOG)}); with --config, the base")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, help="worker threads (default: $MF_THREADS or 1)")
        s.add_argument("--snapshot-every", type=int, dest="snapshot_every", help="keep every r-th kernel slice")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.snapshot_every is not None and args.snapshot_every < 1:
            raise ConfigError("--snapshot-every must be >= 1")
        sc = _scenario(args)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise ConfigError(f"output directory {out_dir} is not writable")
        return COMMANDS[args.command](sc, _Out(out_dir, sc), args)
    except (ConfigError, ConfigurationError, OffMeshError, UnsupportedModelError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, EscapeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # invariant violations surfaced while building inputs
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
