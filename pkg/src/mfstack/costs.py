"""Realized finite-N costs from trajectory bundles, Monte-Carlo ensembles
with common-random-number pairing, the open-loop/feedback performance
differences over a leader-weight grid, and the mean-field gap scaling study.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .feedback import FeedbackSolution, estimate_eps1, solve_feedback_system
from .grid import BlowUpError, TimeGrid
from .model import ModelParams, with_gamma0
from .openloop import OpenLoopSolution, follower_cascade, solve_open_loop
from .simulate import (
    TrajectoryBundle,
    draw_noise,
    meanfield_gap,
    simulate_feedback_batch,
    simulate_openloop_batch,
)


@dataclass(frozen=True)
class MeanStderr:
    mean: float
    stderr: float | None

    def __iter__(self):
        yield self.mean
        yield self.stderr


def summarize(values: np.ndarray) -> MeanStderr:
    """Sample mean with stderr = sample stdev / sqrt(count); the stderr needs
    at least two values."""
    vals = np.asarray(values, dtype=float)
    mean = math.fsum(vals) / vals.size
    if vals.size < 2:
        return MeanStderr(mean, None)
    var = math.fsum((v - mean) ** 2 for v in vals) / (vals.size - 1)
    return MeanStderr(mean, math.sqrt(var / vals.size))


def _time_trapezoid(integrand: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoid over the leading (time) axis."""
    return dt * (0.5 * (integrand[0] + integrand[-1]) + integrand[1:-1].sum(axis=0))


def _qf(rows: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Row-wise quadratic form x^T W x over the last axis."""
    return np.einsum("...i,ij,...j->...", rows, W, rows)


def realized_leader_cost(bundle: TrajectoryBundle, params: ModelParams) -> float:
    """Running tracking/control cost of the leader plus its terminal term,
    for one realization."""
    p = params
    e = bundle.x0path - bundle.xNpath @ p.Gamma0.T
    integrand = _qf(e, p.Q0) + _qf(bundle.u0path, p.R0)
    cost = float(_time_trapezoid(integrand, bundle.grid.dt))
    e_T = bundle.x0path[-1] - bundle.xNpath[-1] @ p.Gamma0bar.T
    cost += float(_qf(e_T, p.H0))
    return cost


def follower_costs(bundle: TrajectoryBundle, params: ModelParams) -> np.ndarray:
    """Per-follower realized costs (length-N array) for one realization."""
    p = params
    ref = bundle.xNpath @ p.Gamma.T + bundle.x0path @ p.Gamma1.T
    e = bundle.xipaths - ref[:, None, :]
    lu0 = bundle.u0path @ p.L.T
    integrand = (
        _qf(e, p.Q)
        + _qf(bundle.uipaths, p.R)
        + 2.0 * np.einsum("knm,km->kn", bundle.uipaths, lu0)
        + _qf(bundle.u0path, p.R1)[:, None]
    )
    costs = _time_trapezoid(integrand, bundle.grid.dt)
    ref_T = bundle.xNpath[-1] @ p.Gammabar.T + bundle.x0path[-1] @ p.Gamma1bar.T
    e_T = bundle.xipaths[-1] - ref_T[None, :]
    costs = costs + _qf(e_T, p.H)
    return costs


def realized_social_cost(bundle: TrajectoryBundle, params: ModelParams) -> tuple[float, float]:
    """(social cost, social cost per follower) for one realization."""
    per_follower = follower_costs(bundle, params)
    total = math.fsum(per_follower)
    return total, total / per_follower.size


def monte_carlo(runner, num_mc: int, master_seed: int) -> dict[str, MeanStderr]:
    """Average runner(seed) over seeds master_seed + k; runner returns a
    mapping of named scalar cost channels."""
    if num_mc < 1:
        raise ValueError("num_mc must be at least 1")
    channels: dict[str, list[float]] = {}
    for k in range(num_mc):
        out = runner(master_seed + k)
        for name, value in out.items():
            channels.setdefault(name, []).append(float(value))
    return {name: summarize(np.asarray(vals)) for name, vals in channels.items()}


def _chunk_size(N: int, num_nodes: int, target_floats: float = 3e6) -> int:
    return max(1, int(target_floats / (max(N, 1) * num_nodes)))


@dataclass
class EnsembleCosts:
    """Per-run cost and gap channels of a (possibly paired) ensemble."""

    N: int
    num_mc: int
    master_seed: int
    j0: dict[str, np.ndarray]
    jsoc: dict[str, np.ndarray]
    sup_gap2: dict[str, np.ndarray]
    eps1_runs: np.ndarray | None = None
    first_bundle: dict[str, TrajectoryBundle] | None = None


def run_ensemble(params: ModelParams, N: int, num_mc: int, master_seed: int,
                 olsol: OpenLoopSolution | None = None,
                 fbsol: FeedbackSolution | None = None,
                 keep_first_bundle: bool = False) -> EnsembleCosts:
    """Simulate num_mc runs (seeds master_seed + k); when both solutions are
    given, each run's noise and initial draws feed both modes (common random
    numbers).  Runs are integrated in memory-bounded batches; per-run results
    are independent of the batching.
    """
    if num_mc < 1:
        raise ValueError("num_mc must be at least 1")
    if olsol is None and fbsol is None:
        raise ValueError("need at least one solved strategy profile")
    grid = olsol.grid if olsol is not None else fbsol.grid
    if olsol is not None and fbsol is not None and olsol.grid != fbsol.grid:
        raise ValueError("paired ensembles need both solutions on one grid")

    j0 = {mode: np.empty(num_mc) for mode, sol in
          (("openloop", olsol), ("feedback", fbsol)) if sol is not None}
    jsoc = {mode: np.empty(num_mc) for mode in j0}
    gap2 = {mode: np.empty(num_mc) for mode in j0}
    eps1_runs = np.empty(num_mc) if fbsol is not None else None
    first = {} if keep_first_bundle else None

    chunk = _chunk_size(N, grid.num_nodes)
    start = 0
    while start < num_mc:
        stop = min(start + chunk, num_mc)
        noises = [draw_noise(params, N, grid, master_seed + k)
                  for k in range(start, stop)]
        batches = {}
        if olsol is not None:
            batches["openloop"] = simulate_openloop_batch(params, olsol, N, noises)
        if fbsol is not None:
            batches["feedback"] = simulate_feedback_batch(params, fbsol, N, noises)
        for mode, bundles in batches.items():
            for offset, bundle in enumerate(bundles):
                k = start + offset
                j0[mode][k] = realized_leader_cost(bundle, params)
                jsoc[mode][k], _ = realized_social_cost(bundle, params)
                gap2[mode][k] = meanfield_gap(bundle).sup_gap2
                if mode == "feedback" and eps1_runs is not None:
                    eps1_runs[k], _ = estimate_eps1(params, fbsol, [bundle])
            if keep_first_bundle and start == 0:
                first[mode] = bundles[0]
        start = stop

    return EnsembleCosts(
        N=N, num_mc=num_mc, master_seed=master_seed,
        j0=j0, jsoc=jsoc, sup_gap2=gap2,
        eps1_runs=eps1_runs, first_bundle=first,
    )


@dataclass(frozen=True)
class SweepRow:
    gamma0: float
    delta0: MeanStderr | None
    delta1: MeanStderr | None
    error: str | None = None


@dataclass(frozen=True)
class SweepResult:
    gamma0_values: tuple[float, ...]
    rows: tuple[SweepRow, ...]
    N: int
    num_mc: int
    master_seed: int


def delta_sweep(params: ModelParams, gamma0_values, N: int, num_mc: int,
                master_seed: int, dt: float = 1e-3,
                pair_runner=None) -> SweepResult:
    """Paired-noise comparison of the two solutions over a grid of leader
    tracking weights: delta0 = J0(open loop) - J0(feedback) and
    delta1 = (Jsoc(open loop) - Jsoc(feedback)) / N, with the stderr of the
    paired per-run differences.

    Each grid value re-triggers the Gamma0-dependent solves; the follower
    cascade does not depend on Gamma0 and is solved once.  A failing grid
    point is recorded with its error and does not abort the sweep.
    `pair_runner(params_at_gamma0, N, seed) -> (j0_ol, jsoc_ol, j0_fb,
    jsoc_fb)` replaces the built-in simulation pair (test hook).
    """
    gamma0_values = [float(g) for g in gamma0_values]
    if not gamma0_values:
        raise ValueError("gamma0 grid must be non-empty")
    grid = TimeGrid.from_horizon(params.T, dt)
    cascade = None if pair_runner is not None else follower_cascade(params, grid)

    rows = []
    for g0 in gamma0_values:
        p_g = with_gamma0(params, g0)
        try:
            if pair_runner is not None:
                quads = np.array([pair_runner(p_g, N, master_seed + k)
                                  for k in range(num_mc)], dtype=float)
                d0 = quads[:, 0] - quads[:, 2]
                d1 = (quads[:, 1] - quads[:, 3]) / N
            else:
                olsol = solve_open_loop(p_g, grid, cascade=cascade)
                fbsol = solve_feedback_system(p_g, grid)
                ens = run_ensemble(p_g, N, num_mc, master_seed, olsol, fbsol)
                d0 = ens.j0["openloop"] - ens.j0["feedback"]
                d1 = (ens.jsoc["openloop"] - ens.jsoc["feedback"]) / N
        except BlowUpError as exc:
            rows.append(SweepRow(g0, None, None,
                                 error=f"solver blow-up at Gamma0={g0:g}: {exc}"))
            continue
        rows.append(SweepRow(g0, summarize(d0), summarize(d1)))
    return SweepResult(
        gamma0_values=tuple(gamma0_values), rows=tuple(rows),
        N=N, num_mc=num_mc, master_seed=master_seed,
    )


@dataclass(frozen=True)
class ConvergenceRow:
    N: int
    mean_sup_gap2: MeanStderr


@dataclass(frozen=True)
class ConvergenceResult:
    rows: tuple[ConvergenceRow, ...]
    slope: float | None  # log-log slope of mean sup-gap^2 versus N

    @property
    def slope_defined(self) -> bool:
        return self.slope is not None


def convergence_study(params: ModelParams, N_list, num_mc: int, master_seed: int,
                      dt: float = 1e-3, mode: str = "openloop") -> ConvergenceResult:
    """Mean squared sup-gap between the follower average and the mean-field
    state for each N, with the fitted log-log slope (1/N theory: slope -1)."""
    N_list = [int(N) for N in N_list]
    if not N_list or any(N < 1 for N in N_list):
        raise ValueError("N_list must contain positive follower counts")
    grid = TimeGrid.from_horizon(params.T, dt)
    if mode == "openloop":
        sol_ol, sol_fb = solve_open_loop(params, grid), None
    elif mode == "feedback":
        sol_ol, sol_fb = None, solve_feedback_system(params, grid)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    rows = []
    for N in N_list:
        ens = run_ensemble(params, N, num_mc, master_seed, sol_ol, sol_fb)
        gaps = ens.sup_gap2["openloop" if mode == "openloop" else "feedback"]
        rows.append(ConvergenceRow(N=N, mean_sup_gap2=summarize(gaps)))

    means = np.array([r.mean_sup_gap2.mean for r in rows])
    slope = None
    if len(rows) >= 2 and np.all(means > 0.0):
        x = np.log(np.array(N_list, dtype=float))
        y = np.log(means)
        slope = float(np.polyfit(x, y, 1)[0])
    return ConvergenceResult(rows=tuple(rows), slope=slope)
