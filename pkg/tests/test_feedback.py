from dataclasses import replace

import numpy as np
import pytest

from mfstack.grid import TimeGrid
from mfstack.model import derive_weights
from mfstack.feedback import (
    feedback_gains,
    leader_cost_closed_form,
    leader_cost_via_moments,
    moment_second_moments,
    solve_feedback_system,
    theoretical_costs_feedback,
)
from mfstack.openloop import solve_pi


@pytest.fixture(scope="module")
def fb_solution(table1):
    return solve_feedback_system(table1, TimeGrid.from_horizon(1.0, 1e-3))


def test_zero_weights_zero_solution(table1):
    params = replace(
        table1,
        Q=np.zeros((1, 1)), Q0=np.zeros((1, 1)), H=np.zeros((1, 1)),
        H0=np.zeros((1, 1)), R1=np.zeros((1, 1)),
        Gamma=np.zeros((1, 1)), Gamma1=np.zeros((1, 1)), Gamma0=np.zeros((1, 1)),
        Gammabar=np.zeros((1, 1)), Gamma1bar=np.zeros((1, 1)),
        Gamma0bar=np.zeros((1, 1)),
    )
    sol = solve_feedback_system(params, TimeGrid.from_horizon(1.0, 1e-2))
    for path in (sol.k, sol.kbar, sol.k0, sol.lam0, sol.lambar,
                 sol.psi1, sol.psi2, sol.psi3, sol.p0, sol.pbar):
        assert np.max(np.abs(path.values)) == 0.0


def test_terminal_values(table1):
    params = replace(
        table1,
        H=np.array([[0.8]]), H0=np.array([[0.6]]),
        Gammabar=np.array([[0.5]]), Gamma1bar=np.array([[0.2]]),
        Gamma0bar=np.array([[0.3]]),
    )
    sol = solve_feedback_system(params, TimeGrid.from_horizon(1.0, 1e-2))
    w = derive_weights(params)
    assert np.array_equal(sol.k.terminal, params.H)
    assert np.array_equal(sol.kbar.terminal, -w.H_Gammabar)
    assert np.array_equal(sol.k0.terminal, -w.H_Gamma1bar)
    assert np.array_equal(sol.lambar.terminal, -w.H_Gamma1bar.T)
    # Lambda0 terminal uses the follower terminal weight H
    assert np.array_equal(
        sol.lam0.terminal, params.Gamma1bar.T @ params.H @ params.Gamma1bar
    )
    assert np.array_equal(sol.psi1.terminal, params.H0)
    assert np.array_equal(
        sol.psi2.terminal, params.Gamma0bar.T @ params.H0 @ params.Gamma0bar
    )
    assert np.array_equal(sol.psi3.terminal, -params.Gamma0bar.T @ params.H0)


def test_transpose_identity_lambda_k0(fb_solution):
    gap = np.max(np.abs(
        fb_solution.lambar.values
        - np.transpose(fb_solution.k0.values, (0, 2, 1))
    ))
    assert gap < 1e-8


def test_symmetry_of_symmetric_unknowns(fb_solution):
    for path in (fb_solution.k, fb_solution.kbar, fb_solution.lam0,
                 fb_solution.psi1, fb_solution.psi2):
        v = path.values
        assert np.max(np.abs(v - np.transpose(v, (0, 2, 1)))) < 1e-8


def test_k_equals_pi(fb_solution, table1):
    pi = solve_pi(table1, fb_solution.grid)
    assert np.max(np.abs(fb_solution.k.values - pi.values)) < 1e-12


def test_richardson_refinement_psi1(table1):
    vals = []
    for dt in (4e-3, 2e-3, 1e-3):
        sol = solve_feedback_system(table1, TimeGrid.from_horizon(1.0, dt))
        vals.append(sol.psi1.values[0, 0, 0])
    factor = abs(vals[0] - vals[1]) / abs(vals[1] - vals[2])
    assert factor >= 12.0


def test_gain_collapse_zero_psi(table1):
    params = replace(table1, Q0=np.zeros((1, 1)), H0=np.zeros((1, 1)),
                     Gamma0=np.zeros((1, 1)), Gamma0bar=np.zeros((1, 1)))
    sol = solve_feedback_system(params, TimeGrid.from_horizon(1.0, 1e-2))
    assert np.max(np.abs(sol.psi1.values)) < 1e-12
    assert np.max(np.abs(sol.psi3.values)) < 1e-12
    assert np.max(np.abs(sol.p0.values)) < 1e-12
    gains = feedback_gains(params, sol)
    # follower law collapses to -R^-1 B^T (K x_i + Kbar xbar + K0 x0)
    rinv_bt = np.linalg.inv(params.R) @ params.B.T
    assert np.allclose(gains.on_x0.values, -(rinv_bt[None] @ sol.k0.values), atol=1e-14)


def test_gain_no_direct_leader_term_when_L_zero(table1):
    params = replace(table1, L=np.zeros((1, 1)))
    sol = solve_feedback_system(params, TimeGrid.from_horizon(1.0, 1e-2))
    gains = feedback_gains(params, sol)
    rinv_bt = np.linalg.inv(params.R) @ params.B.T
    assert np.array_equal(gains.on_xbar.values, -(rinv_bt[None] @ sol.kbar.values))
    assert np.array_equal(gains.on_x0.values, -(rinv_bt[None] @ sol.k0.values))


def test_gain_x0_coefficient_formula(fb_solution, table1):
    gains = feedback_gains(table1, fb_solution)
    rinv = np.linalg.inv(table1.R)
    expected = -rinv @ (table1.B.T @ fb_solution.k0.values[0]
                        + table1.L @ fb_solution.p0.values[0])
    assert np.max(np.abs(gains.on_x0.values[0] - expected)) < 1e-15


def test_moment_cost_zero_system(table1):
    params = replace(
        table1,
        D0=np.zeros((1, 1)), xi0_mean=np.zeros(1), xi0_cov=np.zeros((1, 1)),
        xi_mean=np.zeros(1), xi_cov=np.zeros((1, 1)),
    )
    grid = TimeGrid.from_horizon(1.0, 1e-2)
    sol = solve_feedback_system(params, grid)
    cost = leader_cost_via_moments(
        sol.p0, sol.pbar, params, sol.k, sol.kbar, sol.k0, grid
    )
    assert cost == pytest.approx(0.0, abs=1e-14)


def test_moment_cost_matches_closed_form(table1):
    # the two routes differ by their own quadrature errors (O(dt^2) with
    # different integrands); dt = 2.5e-4 leaves a 5x margin at 1e-6 relative
    sol = solve_feedback_system(table1, TimeGrid.from_horizon(1.0, 2.5e-4))
    via_moments = leader_cost_via_moments(
        sol.p0, sol.pbar, table1, sol.k, sol.kbar, sol.k0, sol.grid
    )
    closed = leader_cost_closed_form(table1, sol)
    assert abs(via_moments - closed) / abs(closed) < 1e-6


def test_moment_cost_increases_under_constant_shift(fb_solution, table1):
    sol = fb_solution
    base = leader_cost_via_moments(
        sol.p0, sol.pbar, table1, sol.k, sol.kbar, sol.k0, sol.grid
    )
    shifted = sol.pbar.values + 0.01
    bumped = leader_cost_via_moments(
        sol.p0, shifted, table1, sol.k, sol.kbar, sol.k0, sol.grid
    )
    assert bumped > base


def test_moment_cost_stationarity(fb_solution, table1):
    sol = fb_solution
    base = leader_cost_via_moments(
        sol.p0, sol.pbar, table1, sol.k, sol.kbar, sol.k0, sol.grid
    )
    rng = np.random.default_rng(12345)
    step = 1e-3
    for _ in range(10):
        d0 = rng.standard_normal(sol.p0.values.shape[1:])
        db = rng.standard_normal(sol.pbar.values.shape[1:])
        norm = np.sqrt(np.sum(d0**2) + np.sum(db**2))
        d0, db = d0 / norm, db / norm
        bumped = leader_cost_via_moments(
            sol.p0.values + step * d0, sol.pbar.values + step * db,
            table1, sol.k, sol.kbar, sol.k0, sol.grid,
        )
        assert bumped >= base - 1e-8


def test_moment_psd_invariant(fb_solution, table1):
    sol = fb_solution
    moments = moment_second_moments(
        sol.p0, sol.pbar, table1, sol.k, sol.kbar, sol.k0, sol.grid
    )
    n = table1.n
    for k in range(0, sol.grid.num_nodes, 50):
        joint = np.block([
            [moments.x0x0.values[k], moments.xbx0.values[k].T],
            [moments.xbx0.values[k], moments.xbxb.values[k]],
        ])
        assert np.linalg.eigvalsh(joint).min() >= -1e-8
        assert np.linalg.eigvalsh(moments.x0x0.values[k]).min() >= -1e-8


def test_theoretical_costs_zero_noise_and_moments(table1):
    params = replace(
        table1,
        D=np.zeros((1, 1)), D0=np.zeros((1, 1)),
        xi0_mean=np.zeros(1), xi0_cov=np.zeros((1, 1)),
        xi_mean=np.zeros(1), xi_cov=np.zeros((1, 1)),
    )
    sol = solve_feedback_system(params, TimeGrid.from_horizon(1.0, 1e-2))
    costs = theoretical_costs_feedback(sol, params, N=20)
    assert costs.social_total == pytest.approx(0.0, abs=1e-14)
    assert costs.leader == pytest.approx(0.0, abs=1e-14)
    assert costs.eps1 is None


def test_theoretical_costs_leader_equals_closed_form(fb_solution, table1):
    costs = theoretical_costs_feedback(fb_solution, table1, N=20)
    assert costs.leader == leader_cost_closed_form(table1, fb_solution)
    assert costs.social_total == pytest.approx(20.0 * costs.social_per_follower)


def test_theoretical_costs_empty_bundles_rejected(fb_solution, table1):
    with pytest.raises(ValueError, match="bundle"):
        theoretical_costs_feedback(fb_solution, table1, N=20, bundles=[])


def test_feedback_ode_residuals(fb_solution, table1):
    from mfstack.feedback import _FbCoeffs, _fb_rhs

    sol = fb_solution
    dt = sol.grid.dt
    rhs = _fb_rhs(_FbCoeffs(table1))
    paths = (sol.k, sol.kbar, sol.k0, sol.lam0, sol.lambar,
             sol.psi1, sol.psi2, sol.psi3)
    names = ("k", "kbar", "k0", "lam0", "lambar", "psi1", "psi2", "psi3")
    rhs_vals = [
        rhs(k * dt, tuple(p.values[k] for p in paths))
        for k in range(sol.grid.num_nodes)
    ]
    for i, (name, path) in enumerate(zip(names, paths)):
        vals = path.values
        fd = (vals[2:] - vals[:-2]) / (2.0 * dt)
        rv = np.array([rhs_vals[k][i] for k in range(sol.grid.num_nodes)])
        resid = np.max(np.abs(fd + rv[1:-1]))
        assert resid <= 10.0 * dt**2, name
