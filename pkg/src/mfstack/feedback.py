"""Feedback Stackelberg solution: the coupled eight-matrix Riccati system
with the leader gains embedded algebraically, the strategy gain paths, a
moment-ODE evaluator of the leader's limiting cost (used for stationarity
checks), and the closed-form limiting costs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import (
    BlowUpError,
    MatrixPath,
    TimeGrid,
    half_node_values,
    integrate_backward,
    trapezoid_integral,
)
from .model import ModelParams, derive_weights


@dataclass(frozen=True)
class FeedbackSolution:
    grid: TimeGrid
    k: MatrixPath
    kbar: MatrixPath
    k0: MatrixPath
    lam0: MatrixPath
    lambar: MatrixPath
    psi1: MatrixPath
    psi2: MatrixPath
    psi3: MatrixPath
    p0: MatrixPath      # leader gain on own state
    pbar: MatrixPath    # leader gain on the mean-field state
    abar: MatrixPath    # closed-loop mean-field drift matrix
    fbar: MatrixPath    # closed-loop leader-to-mean-field coupling


@dataclass(frozen=True)
class FeedbackGains:
    """Strategy coefficients: leader u0 = p0 x0 + pbar xbar; follower
    ui = on_xi x_i + on_x0 x0 + on_xbar xbar."""

    p0: MatrixPath
    pbar: MatrixPath
    on_xi: MatrixPath
    on_x0: MatrixPath
    on_xbar: MatrixPath


@dataclass(frozen=True)
class MomentState:
    """Second moments of the limiting pair (leader state, mean-field state)."""

    grid: TimeGrid
    x0x0: MatrixPath
    xbxb: MatrixPath
    xbx0: MatrixPath


@dataclass(frozen=True)
class FeedbackCosts:
    social_total: float
    social_per_follower: float
    leader: float
    eps1: float | None
    eps1_stderr: float | None


class _FbCoeffs:
    def __init__(self, params: ModelParams):
        self.p = params
        self.w = derive_weights(params)
        self.Rinv = np.linalg.inv(params.R)
        self.R0inv = np.linalg.inv(params.R0)
        self.S = params.B @ self.Rinv @ params.B.T
        self.S0 = params.B0 @ self.R0inv @ params.B0.T
        self.LRL = params.L.T @ self.Rinv @ params.L
        self.G1QG1 = params.Gamma1.T @ params.Q @ params.Gamma1


def _fb_rhs(c: _FbCoeffs):
    p, w = c.p, c.w
    S, S0, LRL = c.S, c.S0, c.LRL
    A, A0, G, G0, F, Q, Q0 = p.A, p.A0, p.G, p.G0, p.F, p.Q, p.Q0
    B0, R1 = p.B0, p.R1
    B1b = w.B1bar
    Gam0 = p.Gamma0
    R0inv = c.R0inv

    GQG0 = Gam0.T @ Q0 @ Gam0
    GQ0 = Gam0.T @ Q0

    def rhs(t, state):
        k, kbar, k0, lam0, lambar, psi1, psi2, psi3 = state
        p0 = -R0inv @ (B0.T @ psi1)
        pbar = -R0inv @ (B0.T @ psi3.T)
        gp = G + B1b @ pbar
        ap = A + gp
        a0p = A0 + B0 @ p0
        g0p = G0 + B0 @ pbar
        fp = F + B1b @ p0
        ksum = k + kbar
        sk = S @ k
        skbar = S @ kbar
        sk0 = S @ k0
        fbar = fp - sk0
        abar = ap - sk - skbar
        r1p0 = R1 @ p0
        r1pbar = R1 @ pbar
        lp0 = LRL @ p0
        lpbar = LRL @ pbar
        s0psi1 = S0 @ psi1
        ksum_fp = ksum @ fp

        d_k = A.T @ k + k @ A - k @ sk + Q
        d_kbar = (
            ap.T @ kbar + kbar @ ap
            - k @ skbar - kbar @ sk - kbar @ skbar
            + gp.T @ k + k @ gp
            + k0 @ g0p + g0p.T @ lambar
            + pbar.T @ r1pbar - w.Q_Gamma - pbar.T @ lpbar
        )
        d_k0 = (
            ap.T @ k0 + k0 @ a0p - ksum @ sk0
            + g0p.T @ lam0 + ksum_fp
            - w.Q_Gamma1 + pbar.T @ r1p0 - pbar.T @ lp0
        )
        d_lam0 = (
            lam0 @ a0p + a0p.T @ lam0
            - lambar @ sk0 + lambar @ fp + fp.T @ k0
            + p0.T @ r1p0 + c.G1QG1 - p0.T @ lp0
        )
        d_lambar = (
            lambar @ ap + a0p.T @ lambar - lambar @ (sk + skbar)
            + lam0 @ g0p + ksum_fp.T
            - w.Q_Gamma1.T + p0.T @ r1pbar - p0.T @ lpbar
        )
        d_psi1 = A0.T @ psi1 + psi1 @ A0 - psi1 @ s0psi1 \
            + fbar.T @ psi3 + psi3.T @ fbar + Q0
        d_psi2 = abar.T @ psi2 + psi2 @ abar - psi3 @ (S0 @ psi3.T) \
            + GQG0 + G0.T @ psi3.T + psi3 @ G0
        d_psi3 = abar.T @ psi3 + psi3 @ A0 - psi3 @ s0psi1 \
            + G0.T @ psi1 + psi2 @ fbar - GQ0
        return d_k, d_kbar, d_k0, d_lam0, d_lambar, d_psi1, d_psi2, d_psi3

    return rhs


def solve_feedback_system(params: ModelParams, grid: TimeGrid) -> FeedbackSolution:
    """Joint backward RK4 of the eight coupled matrix equations; the leader
    gains are algebraic functions of the current-stage psi1/psi3, so every
    stage recomputes them together with the closed-loop drifts."""
    c = _FbCoeffs(params)
    p, w = params, c.w
    terminal = (
        p.H,
        -w.H_Gammabar,
        -w.H_Gamma1bar,
        p.Gamma1bar.T @ p.H @ p.Gamma1bar,
        -w.H_Gamma1bar.T,
        p.H0,
        p.Gamma0bar.T @ p.H0 @ p.Gamma0bar,
        -p.Gamma0bar.T @ p.H0,
    )
    try:
        paths = integrate_backward(_fb_rhs(c), terminal, grid)
    except BlowUpError as exc:
        raise BlowUpError(
            f"the feedback Riccati system has no solution on [0,T]: {exc}",
            t=exc.t,
        ) from exc
    k, kbar, k0, lam0, lambar, psi1, psi2, psi3 = paths

    p0_vals = -(c.R0inv @ p.B0.T)[None] @ psi1.values
    pbar_vals = -(c.R0inv @ p.B0.T)[None] @ np.transpose(psi3.values, (0, 2, 1))
    ksum = k.values + kbar.values
    abar_vals = (p.A + p.G)[None] + w.B1bar[None] @ pbar_vals - c.S[None] @ ksum
    fbar_vals = p.F[None] + w.B1bar[None] @ p0_vals - c.S[None] @ k0.values
    return FeedbackSolution(
        grid=grid, k=k, kbar=kbar, k0=k0, lam0=lam0, lambar=lambar,
        psi1=psi1, psi2=psi2, psi3=psi3,
        p0=MatrixPath(grid, p0_vals), pbar=MatrixPath(grid, pbar_vals),
        abar=MatrixPath(grid, abar_vals), fbar=MatrixPath(grid, fbar_vals),
    )


def feedback_gains(params: ModelParams, sol: FeedbackSolution) -> FeedbackGains:
    c = _FbCoeffs(params)
    RB = c.Rinv @ params.B.T
    RL = c.Rinv @ params.L
    on_xi = -(RB[None] @ sol.k.values)
    on_x0 = -(RB[None] @ sol.k0.values) - RL[None] @ sol.p0.values
    on_xbar = -(RB[None] @ sol.kbar.values) - RL[None] @ sol.pbar.values
    g = sol.grid
    return FeedbackGains(
        p0=sol.p0, pbar=sol.pbar,
        on_xi=MatrixPath(g, on_xi),
        on_x0=MatrixPath(g, on_x0),
        on_xbar=MatrixPath(g, on_xbar),
    )


def _as_path_values(path, grid: TimeGrid) -> np.ndarray:
    vals = path.values if isinstance(path, MatrixPath) else np.asarray(path, dtype=float)
    if vals.shape[0] != grid.num_nodes:
        raise ValueError("gain path does not live on the given grid")
    return vals


def moment_second_moments(p0path, pbarpath, params: ModelParams,
                          k: MatrixPath, kbar: MatrixPath, k0: MatrixPath,
                          grid: TimeGrid) -> MomentState:
    """Forward RK4 of the second-moment equations of the limiting pair
    (leader state, mean-field state) under the given feedback gains.

    The closed-loop coefficients are affine in the supplied paths, so the
    half-step stage values come from cubic midpoint interpolation of the
    assembled coefficient matrices.
    """
    c = _FbCoeffs(params)
    p, w = params, c.w
    p0v = _as_path_values(p0path, grid)
    pbv = _as_path_values(pbarpath, grid)
    ksum = k.values + kbar.values

    a0p = p.A0[None] + p.B0[None] @ p0v
    g0p = p.G0[None] + p.B0[None] @ pbv
    abar = (p.A + p.G)[None] + w.B1bar[None] @ pbv - c.S[None] @ ksum
    fbar = p.F[None] + w.B1bar[None] @ p0v - c.S[None] @ k0.values
    coeff = np.stack([a0p, g0p, abar, fbar], axis=1)  # (nodes, 4, n, n)
    coeff_half = half_node_values(coeff)
    dd = p.D0 @ p.D0.T

    def deriv(co, state):
        a0p_t, g0p_t, abar_t, fbar_t = co
        x00, xbb, xb0 = state
        d_x00 = a0p_t @ x00 + x00 @ a0p_t.T + g0p_t @ xb0 + xb0.T @ g0p_t.T + dd
        d_xbb = abar_t @ xbb + xbb @ abar_t.T + fbar_t @ xb0.T + xb0 @ fbar_t.T
        d_xb0 = abar_t @ xb0 + fbar_t @ x00 + xb0 @ a0p_t.T + xbb @ g0p_t.T
        return d_x00, d_xbb, d_xb0

    mu0, sig0, xib = p.xi0_mean, p.xi0_cov, p.xi_mean
    state = (
        sig0 + np.outer(mu0, mu0),
        np.outer(xib, xib),
        np.outer(xib, mu0),
    )
    nodes = grid.num_nodes
    n = p.n
    out = [np.empty((nodes, n, n)) for _ in range(3)]
    for i, s in enumerate(state):
        out[i][0] = s
    h = grid.dt
    for kk in range(nodes - 1):
        k1 = deriv(coeff[kk], state)
        k2 = deriv(coeff_half[kk], tuple(s + 0.5 * h * d for s, d in zip(state, k1)))
        k3 = deriv(coeff_half[kk], tuple(s + 0.5 * h * d for s, d in zip(state, k2)))
        k4 = deriv(coeff[kk + 1], tuple(s + h * d for s, d in zip(state, k3)))
        state = tuple(
            s + (h / 6.0) * (a + 2.0 * b + 2.0 * cc + d)
            for s, a, b, cc, d in zip(state, k1, k2, k3, k4)
        )
        for i, s in enumerate(state):
            out[i][kk + 1] = s
    return MomentState(
        grid=grid,
        x0x0=MatrixPath(grid, out[0]),
        xbxb=MatrixPath(grid, out[1]),
        xbx0=MatrixPath(grid, out[2]),
    )


def leader_cost_via_moments(p0path, pbarpath, params: ModelParams,
                            k: MatrixPath, kbar: MatrixPath, k0: MatrixPath,
                            grid: TimeGrid,
                            moments: MomentState | None = None) -> float:
    """Limiting leader cost as a trace functional of the second moments,
    evaluated by trapezoid; independent of the adjoint-based closed form."""
    p = params
    if moments is None:
        moments = moment_second_moments(p0path, pbarpath, params, k, kbar, k0, grid)
    p0v = _as_path_values(p0path, grid)
    pbv = _as_path_values(pbarpath, grid)
    x00, xbb, xb0 = moments.x0x0.values, moments.xbxb.values, moments.xbx0.values

    q0g = p.Q0 @ p.Gamma0
    gq0g = p.Gamma0.T @ p.Q0 @ p.Gamma0
    integrand = (
        np.einsum("ij,kji->k", p.Q0, x00)
        - np.einsum("ij,kji->k", q0g, xb0)
        - np.einsum("kij,ji->k", xb0, q0g)     # tr(Gamma0^T Q0 Y^T) = tr(Y Q0 Gamma0)
        + np.einsum("ij,kji->k", gq0g, xbb)
        + np.einsum("kai,ab,kbj,kji->k", p0v, p.R0, p0v, x00)
        + np.einsum("kai,ab,kbj,kij->k", pbv, p.R0, p0v, xb0)
        + np.einsum("kai,ab,kbj,kji->k", p0v, p.R0, pbv, xb0)
        + np.einsum("kai,ab,kbj,kji->k", pbv, p.R0, pbv, xbb)
    )
    cost = trapezoid_integral(integrand, grid)
    h0g = p.H0 @ p.Gamma0bar
    cost += float(
        np.trace(p.H0 @ x00[-1])
        - np.trace(h0g @ xb0[-1])
        - np.trace(xb0[-1] @ h0g)
        + np.trace(p.Gamma0bar.T @ p.H0 @ p.Gamma0bar @ xbb[-1])
    )
    return cost


def leader_cost_closed_form(params: ModelParams, sol: FeedbackSolution) -> float:
    """Limiting leader cost from psi1/psi2/psi3 at time 0 plus the
    common-noise trace integral."""
    p = params
    mu0, sig0, xib = p.xi0_mean, p.xi0_cov, p.xi_mean
    psi1_0 = sol.psi1.values[0]
    cost = float(np.trace(psi1_0 @ (sig0 + np.outer(mu0, mu0))))
    cost += float(xib @ sol.psi2.values[0] @ xib)
    cost += 2.0 * float(xib @ sol.psi3.values[0] @ mu0)
    tr = np.einsum("ij,kil,lj->k", p.D0, sol.psi1.values, p.D0)
    cost += trapezoid_integral(tr, sol.grid)
    return cost


def estimate_eps1(params: ModelParams, sol: FeedbackSolution, bundles) -> tuple[float, float]:
    """Monte-Carlo estimate of the followers' optimality-gap correction from
    simulated feedback trajectory bundles (its defining path functional)."""
    p = params
    c = _FbCoeffs(params)
    vals = []
    for b in bundles:
        grid = b.grid
        dn = b.xNpath - b.xbarpath                        # (nodes, n)
        uN = b.uipaths.mean(axis=1)                       # (nodes, m)
        gain = p.B.T[None] @ sol.kbar.values + p.L[None] @ sol.pbar.values
        v1 = np.einsum("kmn,kn->km", gain, dn)
        term1 = np.einsum("km,ml,kl->k", v1, c.Rinv, v1)
        bracket = uN @ p.L
        half = 0.5 * (np.einsum("kmn,kn->km", sol.pbar.values, b.xbarpath)
                      + np.einsum("kmn,kn->km", sol.pbar.values, b.xNpath))
        bracket = bracket + (np.einsum("kmn,kn->km", sol.p0.values, b.x0path)
                             + half) @ p.R1.T
        lam_mix = (np.einsum("kij,kj->ki", sol.lam0.values, b.x0path)
                   + np.einsum("kij,kj->ki", sol.lambar.values, b.xNpath))
        bracket = bracket + lam_mix @ p.B0
        ksum = sol.k.values + sol.kbar.values
        bracket = bracket + np.einsum("kij,kj->ki", ksum, b.xNpath) @ p.B1
        bracket = bracket + np.einsum("kij,kj->ki", sol.k0.values, b.x0path) @ p.B
        pdn = np.einsum("kmn,kn->km", sol.pbar.values, dn)
        term2 = -2.0 * np.einsum("km,km->k", pdn, bracket)
        vals.append(trapezoid_integral(term1 + term2, grid))
    mean = math.fsum(vals) / len(vals)
    if len(vals) >= 2:
        var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
        stderr = math.sqrt(var / len(vals))
    else:
        stderr = float("nan")
    return mean, stderr


def theoretical_costs_feedback(sol: FeedbackSolution, params: ModelParams,
                               N: int, bundles=None) -> FeedbackCosts:
    """Social cost of the followers (finite-N closed form, with the
    simulation-based correction term when bundles are supplied) and the
    limiting leader cost."""
    p = params
    grid = sol.grid
    mu0, sig0, xib = p.xi0_mean, p.xi0_cov, p.xi_mean
    second_i = p.xi_cov + np.outer(xib, xib)
    second_avg = np.outer(xib, xib) + p.xi_cov / N

    per = float(np.trace(sol.k.values[0] @ second_i))
    per += float(np.trace(sol.kbar.values[0] @ second_avg))
    per += float(np.trace(sol.lam0.values[0] @ (sig0 + np.outer(mu0, mu0))))
    per += 2.0 * float(mu0 @ sol.lambar.values[0] @ xib)
    noise = np.einsum("ij,kil,lj->k", p.D, sol.k.values, p.D)
    noise = noise + np.einsum("ij,kil,lj->k", p.D0, sol.lam0.values, p.D0)
    per += trapezoid_integral(noise, grid)
    kbar_noise = trapezoid_integral(
        np.einsum("ij,kil,lj->k", p.D, sol.kbar.values, p.D), grid
    )
    per += kbar_noise / N

    eps1 = eps1_err = None
    if bundles is not None:
        bundles = list(bundles)
        if not bundles:
            raise ValueError("the correction term needs at least one simulated bundle")
        eps1, eps1_err = estimate_eps1(params, sol, bundles)
        per += eps1

    return FeedbackCosts(
        social_total=N * per,
        social_per_follower=per,
        leader=leader_cost_closed_form(params, sol),
        eps1=eps1,
        eps1_stderr=eps1_err,
    )
