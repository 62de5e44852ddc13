"""Command-line front end: solve, simulate, sweep, and convergence
subcommands over a flat-text scenario config, emitting CSV artifacts and a
JSON run manifest.

Exit code 0 means every requested check passed; the manifest carries the
machine-readable check and failure lists.  Standing-assumption violations
are warnings, not failures (the reference scenario itself violates one).
"""

from __future__ import annotations

import os

# honored before the numeric stack loads; outputs do not depend on it
_threads = os.environ.get("MFSTACK_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import costs as costs_mod
from . import io as io_mod
from .feedback import solve_feedback_system, theoretical_costs_feedback
from .grid import BlowUpError, TimeGrid
from .model import ConfigError, config_echo, load_config, validate_assumptions
from .openloop import solve_open_loop, solve_pi, theoretical_costs_openloop


def default_config_path() -> Path:
    return Path(resources.files("mfstack").joinpath("data/table1.cfg"))


class _Run:
    """Collects checks, warnings, outputs and timings for the manifest."""

    def __init__(self, subcommand: str, out_dir: Path):
        self.subcommand = subcommand
        self.out_dir = out_dir
        self.checks: list[dict] = []
        self.warnings: list[str] = []
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self.extra: dict = {}
        self._t0 = time.perf_counter()

    def check(self, name: str, passed: bool, value=None, tolerance=None):
        self.checks.append({
            "name": name, "passed": bool(passed),
            "value": None if value is None else float(value),
            "tolerance": None if tolerance is None else float(tolerance),
        })
        status = "PASS" if passed else "FAIL"
        print(f"check {name}: {status}"
              + (f" (value {value:.3e})" if value is not None else ""))

    def emit(self, name: str, writer, *args):
        path = self.out_dir / name
        writer(*args, path)
        self.outputs.append(name)
        print(f"wrote {path}")

    def finish(self, params, settings, report) -> int:
        self.timings["total_s"] = time.perf_counter() - self._t0
        failures = [c["name"] for c in self.checks if not c["passed"]]
        manifest = {
            "subcommand": self.subcommand,
            "config": config_echo(params, settings),
            "seed": settings.seed,
            "grid": {
                "T": params.T, "dt": settings.dt,
                "num_nodes": int(round(params.T / settings.dt)) + 1,
            },
            "assumptions": [
                {"name": c.name, "passed": c.passed, "witness": c.witness,
                 "detail": c.detail}
                for c in report.checks
            ],
            "warnings": self.warnings,
            "checks": self.checks,
            "failures": failures,
            "outputs": self.outputs + ["manifest.json"],
            "timings": self.timings,
            **self.extra,
        }
        io_mod.write_manifest(manifest, self.out_dir / "manifest.json")
        print(f"wrote {self.out_dir / 'manifest.json'}")
        if failures:
            print(f"FAILED checks: {', '.join(failures)}")
            return 1
        return 0


def _load(args):
    params, settings = load_config(args.config)
    if args.N is not None and args.subcommand != "convergence":
        from dataclasses import replace
        params = replace(params, N=int(args.N))
    if args.mc is not None:
        from dataclasses import replace
        settings = replace(settings, num_mc=int(args.mc))
    if args.seed is not None:
        from dataclasses import replace
        settings = replace(settings, seed=int(args.seed))
    return params, settings


def _report_assumptions(report, run: _Run):
    for c in report.checks:
        if c.passed is False:
            msg = f"assumption {c.name} violated ({c.detail}); proceeding"
            run.warnings.append(msg)
            print(f"warning: {msg}")


def _max_asym(path) -> float:
    v = path.values
    return float(np.max(np.abs(v - np.transpose(v, (0, 2, 1)))))


def cmd_solve(args) -> int:
    params, settings = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run("solve", out)
    report = validate_assumptions(params)
    _report_assumptions(report, run)
    grid = TimeGrid.from_horizon(params.T, settings.dt)

    t0 = time.perf_counter()
    if args.mode == "openloop":
        sol = solve_open_loop(params, grid)
        run.timings["solve_s"] = time.perf_counter() - t0
        for name, path in (("pi", sol.pi), ("pibar", sol.pibar), ("m", sol.m),
                           ("m0", sol.m0), ("pi0", sol.pi0), ("pcal", sol.pcal)):
            run.emit(f"{name}.csv", io_mod.write_matrix_path_csv, path)
        run.check("pi0_equals_m_transpose",
                  _gap(sol.pi0.values, np.transpose(sol.m.values, (0, 2, 1))) < 1e-8,
                  _gap(sol.pi0.values, np.transpose(sol.m.values, (0, 2, 1))), 1e-8)
        for name, path in (("pi", sol.pi), ("pibar", sol.pibar),
                           ("m0", sol.m0), ("pcal", sol.pcal)):
            run.check(f"{name}_symmetric", _max_asym(path) < 1e-8,
                      _max_asym(path), 1e-8)
        run.check("terminal_conditions_exact",
                  bool(np.array_equal(sol.pcal.terminal, sol.aug.Hcal)
                       and np.array_equal(sol.pi.terminal, params.H)))
    else:
        sol = solve_feedback_system(params, grid)
        run.timings["solve_s"] = time.perf_counter() - t0
        for name, path in (("k", sol.k), ("kbar", sol.kbar), ("k0", sol.k0),
                           ("lambda0", sol.lam0), ("lambdabar", sol.lambar),
                           ("psi1", sol.psi1), ("psi2", sol.psi2),
                           ("psi3", sol.psi3)):
            run.emit(f"{name}.csv", io_mod.write_matrix_path_csv, path)
        lam_gap = _gap(sol.lambar.values, np.transpose(sol.k0.values, (0, 2, 1)))
        run.check("lambdabar_equals_k0_transpose", lam_gap < 1e-8, lam_gap, 1e-8)
        for name, path in (("k", sol.k), ("kbar", sol.kbar), ("lambda0", sol.lam0),
                           ("psi1", sol.psi1), ("psi2", sol.psi2)):
            run.check(f"{name}_symmetric", _max_asym(path) < 1e-8,
                      _max_asym(path), 1e-8)
        pi = solve_pi(params, grid)
        k_gap = _gap(sol.k.values, pi.values)
        run.check("k_equals_pi", k_gap < 1e-12, k_gap, 1e-12)
        run.check("terminal_conditions_exact",
                  bool(np.array_equal(sol.k.terminal, params.H)
                       and np.array_equal(sol.psi1.terminal, params.H0)))
    return run.finish(params, settings, report)


def _gap(a, b) -> float:
    return float(np.max(np.abs(a - b)))


def cmd_simulate(args) -> int:
    params, settings = _load(args)
    if params.N < 1:
        print("error: N must be at least 1", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run("simulate", out)
    report = validate_assumptions(params)
    _report_assumptions(report, run)
    grid = TimeGrid.from_horizon(params.T, settings.dt)

    t0 = time.perf_counter()
    olsol = solve_open_loop(params, grid) if args.mode == "openloop" else None
    fbsol = solve_feedback_system(params, grid) if args.mode == "feedback" else None
    run.timings["solve_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ens = costs_mod.run_ensemble(
        params, params.N, settings.num_mc, settings.seed,
        olsol=olsol, fbsol=fbsol, keep_first_bundle=True,
    )
    run.timings["simulate_s"] = time.perf_counter() - t0
    mode = args.mode
    bundle = ens.first_bundle[mode]

    if mode == "openloop":
        limits = theoretical_costs_openloop(params, olsol, seed=settings.seed)
        j0_limit = limits.leader
        jsoc_limit = limits.social_per_follower
        notes = {"m_T": limits.m_T, "m_T_stderr": limits.m_T_stderr}
    else:
        fb = theoretical_costs_feedback(fbsol, params, params.N)
        eps1 = costs_mod.summarize(ens.eps1_runs)
        j0_limit = fb.leader
        jsoc_limit = fb.social_per_follower + eps1.mean
        notes = {"eps1": eps1.mean, "eps1_stderr": eps1.stderr}

    cost_report = io_mod.CostReport(
        mode=mode, N=params.N, num_mc=settings.num_mc, seed=settings.seed,
        j0_realized=costs_mod.summarize(ens.j0[mode]),
        jsoc_per_n_realized=costs_mod.summarize(ens.jsoc[mode] / params.N),
        j0_limit=j0_limit, jsoc_per_n_limit=jsoc_limit, notes=notes,
    )
    run.extra["cost_report"] = cost_report.to_json()
    run.extra["mean_sup_gap2"] = costs_mod.summarize(ens.sup_gap2[mode])

    run.emit("trajectory.csv", io_mod.write_trajectory_csv, bundle)
    channels = {
        "j0": ens.j0[mode],
        "jsoc_per_n": ens.jsoc[mode] / params.N,
        "sup_gap2": ens.sup_gap2[mode],
    }
    run.emit("costs.csv", io_mod.write_runs_csv, channels)
    run.emit("report.txt", io_mod.write_report, [cost_report])
    for line in cost_report.lines():
        print(line)
    print(f"mean sup-gap^2 = {run.extra['mean_sup_gap2'].mean:.6g}")
    return run.finish(params, settings, report)


def cmd_sweep(args) -> int:
    params, settings = _load(args)
    try:
        lo, hi = (float(x) for x in args.gamma0_range.split(":"))
    except ValueError:
        print(f"error: bad --gamma0-range {args.gamma0_range!r} (want MIN:MAX)",
              file=sys.stderr)
        return 2
    if lo > hi:
        print("error: gamma0 range minimum exceeds maximum", file=sys.stderr)
        return 2
    if args.points < 1:
        print("error: need at least one sweep point", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run("sweep", out)
    report = validate_assumptions(params)
    _report_assumptions(report, run)

    grid_values = np.linspace(lo, hi, args.points)
    t0 = time.perf_counter()
    result = costs_mod.delta_sweep(
        params, grid_values, params.N, settings.num_mc, settings.seed,
        dt=settings.dt,
    )
    run.timings["sweep_s"] = time.perf_counter() - t0
    run.emit("sweep.csv", io_mod.write_sweep_csv, result)

    summary = []
    for row in result.rows:
        if row.error is not None:
            summary.append({"gamma0": row.gamma0, "error": row.error})
            run.check(f"sweep_point_{row.gamma0:g}", False)
            continue
        entry = {
            "gamma0": row.gamma0,
            "delta0": [row.delta0.mean, row.delta0.stderr],
            "delta1": [row.delta1.mean, row.delta1.stderr],
            "leader_prefers_openloop": row.delta0.mean < 0,
            "followers_prefer_feedback": row.delta1.mean > 0,
        }
        summary.append(entry)
        print(f"gamma0={row.gamma0:g}: delta0={row.delta0.mean:+.4g}"
              f" (+-{row.delta0.stderr:.2g}), delta1={row.delta1.mean:+.4g}"
              f" (+-{row.delta1.stderr:.2g})")
    run.extra["sign_summary"] = summary
    return run.finish(params, settings, report)


def cmd_convergence(args) -> int:
    params, settings = _load(args)
    try:
        n_list = [int(x) for x in str(args.N or "10,40,160").split(",")]
    except ValueError:
        print(f"error: bad --N list {args.N!r}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run("convergence", out)
    report = validate_assumptions(params)
    _report_assumptions(report, run)

    t0 = time.perf_counter()
    result = costs_mod.convergence_study(
        params, n_list, settings.num_mc, settings.seed,
        dt=settings.dt, mode=args.mode,
    )
    run.timings["convergence_s"] = time.perf_counter() - t0
    run.emit("convergence.csv", io_mod.write_convergence_csv, result)
    if result.slope_defined:
        print(f"fitted log-log slope = {result.slope:.4f}")
    else:
        print("fitted log-log slope undefined"
              " (single population size or zero gaps)")
    run.extra["slope"] = result.slope
    return run.finish(params, settings, report)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfstack",
        description="Solve and simulate the leader/followers mean-field game",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, fn in (("solve", cmd_solve), ("simulate", cmd_simulate),
                     ("sweep", cmd_sweep), ("convergence", cmd_convergence)):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", default=str(default_config_path()))
        sp.add_argument("--mode", choices=("openloop", "feedback"),
                        default="openloop")
        sp.add_argument("--N", default=None,
                        help="follower count (comma list for convergence)")
        sp.add_argument("--mc", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="out")
        if name == "sweep":
            sp.add_argument("--points", type=int, default=11)
            sp.add_argument("--gamma0-range", default="0:5")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BlowUpError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
