"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
line with the measured values and asserting the stated tolerance and runtime
budget.

Criterion 7 is split in two: the reference-point signs (7a) hold with wide
margins, while the grid-wide sign-pattern bound (7b) does not hold for this
scenario - the middle of the grid reverses both preferences with many-sigma
significance, and both solutions pass independent optimality checks there.
7b is asserted as stated and reports the measured counts.
"""

import math
import time
from dataclasses import replace

import numpy as np
from mfstack.cli import main
from mfstack.costs import convergence_study, run_ensemble, summarize
from mfstack.feedback import (
    _FbCoeffs,
    _fb_rhs,
    leader_cost_closed_form,
    leader_cost_via_moments,
    solve_feedback_system,
    theoretical_costs_feedback,
)
from mfstack.grid import BrownianBundle, TimeGrid
from mfstack.openloop import (
    _Coeffs,
    _aug_blocks,
    _cascade_rhs,
    _pi_rhs,
    decoupling_residual,
    solve_open_loop,
    solve_pi,
    theoretical_costs_openloop,
)
from mfstack.simulate import SimNoise, draw_noise, simulate_openloop

PI_STAT = math.sqrt(6.0) - 2.0
# residual-constant lock: measured max |residual|/dt^2 over all 14 solved
# paths on the reference scenario is ~2.0 (first verified run)
RESIDUAL_C = 4.0


def _line(num, ok, detail):
    print(f"ACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def _riccati_exact(s):
    r1, r2 = -2.0 + math.sqrt(6.0), -2.0 - math.sqrt(6.0)
    k = (1.0 - r1) / (1.0 - r2) * math.exp(-math.sqrt(6.0) * s)
    return (r1 - r2 * k) / (1.0 - k)


def test_criterion_1_riccati_correctness(table1):
    t0 = time.perf_counter()
    params = replace(table1, H=np.ones((1, 1)))
    pi = solve_pi(params, TimeGrid.from_horizon(10.0, 1e-3))
    err_root = abs(pi.values[0, 0, 0] - PI_STAT)

    exact = _riccati_exact(1.0)
    errs = []
    for dt in (0.05, 0.025):
        p = solve_pi(params, TimeGrid.from_horizon(1.0, dt))
        errs.append(abs(p.values[0, 0, 0] - exact))
    factor = errs[0] / errs[1]
    elapsed = time.perf_counter() - t0
    ok = err_root < 1e-4 and 12.0 <= factor <= 20.0 and elapsed < 1.0
    _line(1, ok, f"|Pi(0)-root| = {err_root:.2e} (<1e-4), order factor "
                 f"{factor:.2f} in [12,20], {elapsed:.2f}s (<1s)")
    assert err_root < 1e-4
    assert 12.0 <= factor <= 20.0
    assert elapsed < 1.0


def test_criterion_2_structural_identities(table1):
    t0 = time.perf_counter()
    grid = TimeGrid.from_horizon(1.0, 1e-3)
    ol = solve_open_loop(table1, grid)
    fb = solve_feedback_system(table1, grid)

    def asym(path):
        v = path.values
        return np.max(np.abs(v - np.transpose(v, (0, 2, 1))))

    gaps = {
        "pi0 - m^T": np.max(np.abs(
            ol.pi0.values - np.transpose(ol.m.values, (0, 2, 1)))),
        "lambar - k0^T": np.max(np.abs(
            fb.lambar.values - np.transpose(fb.k0.values, (0, 2, 1)))),
        "asym": max(asym(p) for p in (ol.pi, ol.pibar, ol.m0, fb.lam0,
                                      fb.psi1, fb.psi2, ol.pcal)),
    }
    k_gap = np.max(np.abs(fb.k.values - ol.pi.values))
    elapsed = time.perf_counter() - t0
    worst = max(gaps.values())
    ok = worst < 1e-8 and k_gap < 1e-12 and elapsed < 1.0
    _line(2, ok, f"identity/symmetry residuals <= {worst:.2e} (<1e-8), "
                 f"K-Pi gap {k_gap:.2e} (<1e-12), {elapsed:.2f}s (<1s)")
    assert worst < 1e-8
    assert k_gap < 1e-12
    assert elapsed < 1.0


def test_criterion_3_ode_residuals(table1):
    t0 = time.perf_counter()
    grid = TimeGrid.from_horizon(1.0, 1e-3)
    dt = grid.dt
    ol = solve_open_loop(table1, grid)
    fb = solve_feedback_system(table1, grid)
    c = _Coeffs(table1)

    def resid(path, rhs_vals):
        fd = (path.values[2:] - path.values[:-2]) / (2.0 * dt)
        return np.max(np.abs(fd + rhs_vals[1:-1]))

    worst = resid(ol.pi, np.array(
        [_pi_rhs(c)(k * dt, ol.pi.values[k]) for k in range(grid.num_nodes)]
    ))
    cas = _cascade_rhs(c)
    cas_vals = [
        cas(k * dt, (ol.pibar.values[k], ol.m.values[k],
                     ol.m0.values[k], ol.pi0.values[k]))
        for k in range(grid.num_nodes)
    ]
    for i, path in enumerate((ol.pibar, ol.m, ol.m0, ol.pi0)):
        worst = max(worst, resid(path, np.array([cv[i] for cv in cas_vals])))
    pc_rhs = []
    for k in range(grid.num_nodes):
        acal, qcal, _ = _aug_blocks(c, ol.pibar.values[k], ol.m.values[k],
                                    ol.m0.values[k], ol.pi0.values[k])
        pc = ol.pcal.values[k]
        pc_rhs.append(pc @ acal + acal.T @ pc - pc @ ol.aug.Bcal @ pc - qcal)
    worst = max(worst, resid(ol.pcal, np.array(pc_rhs)))

    fb_rhs = _fb_rhs(_FbCoeffs(table1))
    fb_paths = (fb.k, fb.kbar, fb.k0, fb.lam0, fb.lambar,
                fb.psi1, fb.psi2, fb.psi3)
    fb_vals = [fb_rhs(k * dt, tuple(p.values[k] for p in fb_paths))
               for k in range(grid.num_nodes)]
    for i, path in enumerate(fb_paths):
        worst = max(worst, resid(path, np.array([fv[i] for fv in fb_vals])))
    elapsed = time.perf_counter() - t0
    bound = RESIDUAL_C * dt**2
    ok = worst <= bound and elapsed < 5.0
    _line(3, ok, f"max residual {worst:.3e} <= C dt^2 = {bound:.3e} (C = "
                 f"{RESIDUAL_C}), {elapsed:.2f}s (<5s)")
    assert worst <= bound
    assert elapsed < 5.0


def test_criterion_4_feedback_stationarity(table1):
    t0 = time.perf_counter()
    grid = TimeGrid.from_horizon(1.0, 1e-3)
    sol = solve_feedback_system(table1, grid)
    base = leader_cost_via_moments(
        sol.p0, sol.pbar, table1, sol.k, sol.kbar, sol.k0, grid
    )
    rng = np.random.default_rng(20240902)
    worst_drop = 0.0
    for _ in range(10):
        d0 = rng.standard_normal(sol.p0.values.shape[1:])
        db = rng.standard_normal(sol.pbar.values.shape[1:])
        norm = math.sqrt(float((d0**2).sum() + (db**2).sum()))
        bumped = leader_cost_via_moments(
            sol.p0.values + 1e-3 * d0 / norm, sol.pbar.values + 1e-3 * db / norm,
            table1, sol.k, sol.kbar, sol.k0, grid,
        )
        worst_drop = min(worst_drop, bumped - base)

    # cross-formula agreement on a finer grid (both routes carry their own
    # O(dt^2) quadrature error; dt = 2.5e-4 leaves a 5x margin at 1e-6)
    fine = TimeGrid.from_horizon(1.0, 2.5e-4)
    sol_f = solve_feedback_system(table1, fine)
    via = leader_cost_via_moments(
        sol_f.p0, sol_f.pbar, table1, sol_f.k, sol_f.kbar, sol_f.k0, fine
    )
    closed = leader_cost_closed_form(table1, sol_f)
    rel = abs(via - closed) / abs(closed)
    elapsed = time.perf_counter() - t0
    ok = worst_drop >= -1e-8 and rel < 1e-6 and elapsed < 5.0
    _line(4, ok, f"worst perturbation decrease {worst_drop:.2e} (>=-1e-8), "
                 f"moment-vs-closed-form gap {rel:.2e} (<1e-6), "
                 f"{elapsed:.2f}s (<5s)")
    assert worst_drop >= -1e-8
    assert rel < 1e-6
    assert elapsed < 5.0


def test_criterion_5_gap_scaling(table1):
    t0 = time.perf_counter()
    res = convergence_study(table1, [10, 40, 160], num_mc=200,
                            master_seed=42, dt=1e-3)
    elapsed = time.perf_counter() - t0
    ok = res.slope is not None and -1.4 <= res.slope <= -0.6 and elapsed < 60.0
    _line(5, ok, f"log-log slope {res.slope:.3f} in [-1.4,-0.6], "
                 f"{elapsed:.1f}s (<60s)")
    assert res.slope is not None
    assert -1.4 <= res.slope <= -0.6
    assert elapsed < 60.0


def test_criterion_6_cost_formula_consistency(table1):
    t0 = time.perf_counter()
    grid = TimeGrid.from_horizon(1.0, 1e-3)
    olsol = solve_open_loop(table1, grid)
    fbsol = solve_feedback_system(table1, grid)
    N, mc = 100, 200
    ens = run_ensemble(table1, N, mc, 42, olsol=olsol, fbsol=fbsol)
    ol_lim = theoretical_costs_openloop(table1, olsol, seed=42)
    fb_lim = theoretical_costs_feedback(fbsol, table1, N)
    eps1 = summarize(ens.eps1_runs)
    rels = {}
    for mode, j0_lim, jsoc_lim in (
        ("openloop", ol_lim.leader, ol_lim.social_per_follower),
        ("feedback", fb_lim.leader, fb_lim.social_per_follower + eps1.mean),
    ):
        j0 = summarize(ens.j0[mode]).mean
        jsoc = summarize(ens.jsoc[mode] / N).mean
        rels[f"{mode} J0"] = abs(j0 - j0_lim) / abs(j0_lim)
        rels[f"{mode} Jsoc/N"] = abs(jsoc - jsoc_lim) / abs(jsoc_lim)
    worst = max(rels.values())
    elapsed = time.perf_counter() - t0
    ok = worst < 0.10 and elapsed < 120.0
    _line(6, ok, "relative gaps "
          + ", ".join(f"{k} {v:.2%}" for k, v in rels.items())
          + f" (<10%), {elapsed:.1f}s (<2min)")
    assert worst < 0.10
    assert elapsed < 120.0


def test_criterion_7a_signs_at_reference_point(table1):
    t0 = time.perf_counter()
    grid = TimeGrid.from_horizon(1.0, 1e-3)
    olsol = solve_open_loop(table1, grid)
    fbsol = solve_feedback_system(table1, grid)
    ens = run_ensemble(table1, 20, 200, 42, olsol=olsol, fbsol=fbsol)
    d0 = summarize(ens.j0["openloop"] - ens.j0["feedback"])
    d1 = summarize((ens.jsoc["openloop"] - ens.jsoc["feedback"]) / 20)
    elapsed = time.perf_counter() - t0
    ok = (d0.mean < -2.0 * d0.stderr) and (d1.mean > 2.0 * d1.stderr)
    _line("7a", ok, f"Gamma0=1: delta0 {d0.mean:+.4f}+-{d0.stderr:.4f} (<0 "
                    f"at 2 sigma), delta1 {d1.mean:+.4f}+-{d1.stderr:.4f} "
                    f"(>0 at 2 sigma), {elapsed:.1f}s")
    assert d0.mean < -2.0 * d0.stderr
    assert d1.mean > 2.0 * d1.stderr


def test_criterion_7b_sign_pattern_across_grid(table1):
    # Known-red: the middle of the grid reverses both preferences with
    # many-sigma significance for this scenario (the figures being
    # reproduced are dominated by the large-Gamma0 region, where the
    # pattern holds strongly).  The test states the criterion faithfully
    # and reports the measured counts.
    t0 = time.perf_counter()
    from mfstack.costs import delta_sweep

    res = delta_sweep(table1, np.linspace(0.0, 5.0, 11), N=20, num_mc=200,
                      master_seed=42)
    leader_ol = sum(1 for r in res.rows if r.error is None and r.delta0.mean < 0)
    followers_fb = sum(1 for r in res.rows if r.error is None and r.delta1.mean > 0)
    elapsed = time.perf_counter() - t0
    ok = leader_ol >= 9 and followers_fb >= 9 and elapsed < 300.0
    _line("7b", ok, f"leader-favors-open-loop at {leader_ol}/11 points, "
                    f"followers-favor-feedback at {followers_fb}/11 "
                    f"(need >=9 each), {elapsed:.1f}s (<5min)")
    assert elapsed < 300.0
    assert leader_ol >= 9, (
        f"sign pattern holds at {leader_ol}/11 grid points for the leader; "
        "the preference reverses on the middle of the grid (verified against "
        "independent stationarity checks of both solutions)"
    )
    assert followers_fb >= 9


def test_criterion_8_decoupling_self_consistency(table1):
    t0 = time.perf_counter()
    N = 5
    coarse_grid = TimeGrid.from_horizon(1.0, 1e-3)
    fine_grid = coarse_grid.refined(2)
    sol_c = solve_open_loop(table1, coarse_grid)
    sol_f = solve_open_loop(table1, fine_grid)
    ratios = []
    for seed in range(4):
        fine = draw_noise(table1, N, fine_grid, 4200 + seed)
        inc = fine.bundle.increments
        coarse = SimNoise(
            seed=fine.seed,
            bundle=BrownianBundle(seed=fine.seed, grid=coarse_grid,
                                  increments=inc[:, 0::2] + inc[:, 1::2]),
            xi0=fine.xi0, xis=fine.xis,
        )
        rc = decoupling_residual(
            table1, sol_c, simulate_openloop(table1, sol_c, N, coarse)
        ).mean()
        rf = decoupling_residual(
            table1, sol_f, simulate_openloop(table1, sol_f, N, fine)
        ).mean()
        ratios.append(rc / rf)
    ratio = float(np.mean(ratios))
    elapsed = time.perf_counter() - t0
    ok = 1.5 <= ratio <= 3.0 and elapsed < 30.0
    _line(8, ok, f"residual ratio dt vs dt/2 = {ratio:.3f} in [1.5,3] "
                 f"(common noise refinement), {elapsed:.1f}s (<30s)")
    assert 1.5 <= ratio <= 3.0
    assert elapsed < 30.0


def test_criterion_9_determinism(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        code = main(["simulate", "--mode", "openloop", "--out", str(out)])
        assert code == 0
    same = all(
        (out1 / name).read_bytes() == (out2 / name).read_bytes()
        for name in ("trajectory.csv", "costs.csv")
    )
    _line(9, same, "two identical simulate runs produce byte-identical CSVs")
    assert same
