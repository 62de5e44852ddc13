"""Open-loop asymptotic Stackelberg solution: the follower Riccati cascade,
the augmented 4n-block leader Riccati equation, the decentralized gain paths,
and the closed-form limiting costs.

All backward equations are passed to the integrator as the bracket F of
dP/dt + F = 0 (the integrator marches in remaining time).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import (
    BLOWUP_LIMIT,
    BlowUpError,
    MatrixPath,
    TimeGrid,
    cov_factor,
    half_node_values,
    integrate_backward,
    trapezoid_integral,
)
from .model import DerivedWeights, ModelParams, derive_weights


@dataclass(frozen=True)
class AugSystem:
    """Augmented coefficient system for the leader's decoupled FBSDE.

    Acal/Qcal/Dbar0 vary in time through the cascade solutions; Bcal, Hcal
    and Dcal0 are constant. Block order of the augmented state:
    [leader mean field, follower mean field, leader adjoint dual, follower
    adjoint dual], each of size n.
    """

    params: ModelParams
    weights: DerivedWeights
    Acal: MatrixPath
    Qcal: MatrixPath
    Dbar0: MatrixPath
    Bcal: np.ndarray
    Hcal: np.ndarray
    Dcal0: np.ndarray


@dataclass(frozen=True)
class OpenLoopGains:
    """Decentralized control-law coefficients.

    Leader: u0 = phi0 @ X (X the augmented state).  Follower i:
    ui = on_xibar x̄_i + on_xbar x̄ + on_x0 x̄_0 + on_phibar φ̄ + on_u0 u0.
    """

    phi0: MatrixPath
    on_xibar: MatrixPath
    on_xbar: MatrixPath
    on_x0: MatrixPath
    on_phibar: np.ndarray
    on_u0: np.ndarray


@dataclass(frozen=True)
class OpenLoopSolution:
    grid: TimeGrid
    pi: MatrixPath
    pibar: MatrixPath
    m: MatrixPath
    m0: MatrixPath
    pi0: MatrixPath
    aug: AugSystem
    pcal: MatrixPath
    zpath: MatrixPath
    gains: OpenLoopGains

    @property
    def params(self) -> ModelParams:
        return self.aug.params


@dataclass(frozen=True)
class OpenLoopCosts:
    """Limiting (N -> infinity) costs under the open-loop equilibrium."""

    leader: float
    social_per_follower: float
    m_T: float
    m_T_stderr: float
    mc_paths: int


class _Coeffs:
    """Constant matrices shared by every open-loop equation."""

    def __init__(self, params: ModelParams):
        self.p = params
        self.w = derive_weights(params)
        self.Rinv = np.linalg.inv(params.R)
        self.R0inv = np.linalg.inv(params.R0)
        self.S = params.B @ self.Rinv @ params.B.T
        self.AG = params.A + params.G
        self.G1QG1 = params.Gamma1.T @ params.Q @ params.Gamma1


def _pi_rhs(c: _Coeffs):
    A, Q, S = c.p.A, c.p.Q, c.S

    # same association as the feedback system's k-equation, so the two
    # solves agree bit for bit
    def rhs(t, pi):
        return A.T @ pi + pi @ A - pi @ (S @ pi) + Q

    return rhs


def _cascade_rhs(c: _Coeffs):
    p, w = c.p, c.w
    AG, S = c.AG, c.S
    A0, G0, F = p.A0, p.G0, p.F
    QmQG = p.Q - w.Q_Gamma

    def rhs(t, state):
        pibar, m, m0, pi0 = state
        d_pibar = AG.T @ pibar + pibar @ AG - pibar @ S @ pibar \
            + m @ G0 + G0.T @ pi0 + QmQG
        d_m = AG.T @ m + m @ A0 - pibar @ S @ m + G0.T @ m0 + pibar @ F - w.Q_Gamma1
        d_m0 = m0 @ A0 + A0.T @ m0 + (F.T - pi0 @ S) @ m + pi0 @ F + c.G1QG1
        d_pi0 = pi0 @ AG + A0.T @ pi0 - pi0 @ S @ pibar + m0 @ G0 \
            + F.T @ pibar - w.Q_Gamma1.T
        return d_pibar, d_m, d_m0, d_pi0

    return rhs


def _cascade_terminals(c: _Coeffs):
    p, w = c.p, c.w
    return (
        p.H - w.H_Gammabar,
        -w.H_Gamma1bar,
        p.Gamma1bar.T @ p.H @ p.Gamma1bar,
        -w.H_Gamma1bar.T,
    )


def solve_pi(params: ModelParams, grid: TimeGrid) -> MatrixPath:
    """Follower state-feedback Riccati equation, terminal value H."""
    c = _Coeffs(params)
    return integrate_backward(_pi_rhs(c), params.H, grid)


def solve_meanfield_riccati(params: ModelParams, grid: TimeGrid):
    """Jointly integrate the coupled mean-field cascade (pibar, m, m0, pi0).

    pi0 is kept as an independent unknown; pi0 = m^T is checked downstream
    rather than imposed.
    """
    c = _Coeffs(params)
    return integrate_backward(_cascade_rhs(c), _cascade_terminals(c), grid)


def _aug_blocks(c: _Coeffs, pibar, m, m0, pi0):
    """Assemble Acal(t), Qcal(t), Dbar0(t) from cascade values at one time."""
    p, w = c.p, c.w
    n = p.n
    Ahat = c.AG - c.S @ pibar
    Xi0 = pi0 @ w.B1bar + m0 @ p.B0
    Xibar = pibar @ w.B1bar + m @ p.B0
    FM = p.F - c.S @ m
    Z = np.zeros((n, n))

    acal = np.block([
        [p.A0, p.G0, -p.B0 @ c.R0inv @ Xi0.T, -p.B0 @ c.R0inv @ Xibar.T],
        [FM, Ahat, -w.B1bar @ c.R0inv @ Xi0.T, -w.B1bar @ c.R0inv @ Xibar.T],
        [Z, Z, p.A0, p.G0],
        [Z, Z, FM, Ahat],
    ])
    qcal = np.block([
        [-p.Q0, p.Q0 @ p.Gamma0, Z, Z],
        [p.Gamma0.T @ p.Q0, -p.Gamma0.T @ p.Q0 @ p.Gamma0, Z, Z],
        [Z, Z, Xi0 @ c.R0inv @ Xi0.T, Xi0 @ c.R0inv @ Xibar.T],
        [Z, Z, Xibar @ c.R0inv @ Xi0.T, Xibar @ c.R0inv @ Xibar.T],
    ])
    zd = np.zeros_like(p.D0)
    dbar0 = np.vstack([zd, zd, m0 @ p.D0, m @ p.D0])
    return acal, qcal, dbar0


def build_augmented(params: ModelParams, pibar: MatrixPath, m: MatrixPath,
                    m0: MatrixPath, pi0: MatrixPath, grid: TimeGrid) -> AugSystem:
    """Augmented coefficient paths for the leader's 4n-dimensional problem.

    Node-vectorized assembly of the same blocks _aug_blocks builds at a
    single time.
    """
    c = _Coeffs(params)
    p, w = params, c.w
    n, d = p.n, p.d
    nodes = grid.num_nodes

    tr = lambda a: np.transpose(a, (0, 2, 1))
    Ahat = c.AG[None] - c.S[None] @ pibar.values
    Xi0 = pi0.values @ w.B1bar + m0.values @ p.B0
    Xibar = pibar.values @ w.B1bar + m.values @ p.B0
    FM = p.F[None] - c.S[None] @ m.values
    B0R = p.B0 @ c.R0inv
    B1R = w.B1bar @ c.R0inv

    acal = np.zeros((nodes, 4 * n, 4 * n))
    acal[:, :n, :n] = p.A0
    acal[:, :n, n:2 * n] = p.G0
    acal[:, :n, 2 * n:3 * n] = -B0R[None] @ tr(Xi0)
    acal[:, :n, 3 * n:] = -B0R[None] @ tr(Xibar)
    acal[:, n:2 * n, :n] = FM
    acal[:, n:2 * n, n:2 * n] = Ahat
    acal[:, n:2 * n, 2 * n:3 * n] = -B1R[None] @ tr(Xi0)
    acal[:, n:2 * n, 3 * n:] = -B1R[None] @ tr(Xibar)
    acal[:, 2 * n:3 * n, 2 * n:3 * n] = p.A0
    acal[:, 2 * n:3 * n, 3 * n:] = p.G0
    acal[:, 3 * n:, 2 * n:3 * n] = FM
    acal[:, 3 * n:, 3 * n:] = Ahat

    qcal = np.zeros((nodes, 4 * n, 4 * n))
    qcal[:, :n, :n] = -p.Q0
    qcal[:, :n, n:2 * n] = p.Q0 @ p.Gamma0
    qcal[:, n:2 * n, :n] = p.Gamma0.T @ p.Q0
    qcal[:, n:2 * n, n:2 * n] = -p.Gamma0.T @ p.Q0 @ p.Gamma0
    qcal[:, 2 * n:3 * n, 2 * n:3 * n] = Xi0 @ c.R0inv[None] @ tr(Xi0)
    qcal[:, 2 * n:3 * n, 3 * n:] = Xi0 @ c.R0inv[None] @ tr(Xibar)
    qcal[:, 3 * n:, 2 * n:3 * n] = Xibar @ c.R0inv[None] @ tr(Xi0)
    qcal[:, 3 * n:, 3 * n:] = Xibar @ c.R0inv[None] @ tr(Xibar)

    dbar0 = np.zeros((nodes, 4 * n, d))
    dbar0[:, 2 * n:3 * n] = m0.values @ p.D0
    dbar0[:, 3 * n:] = m.values @ p.D0

    S = c.S
    Zmm = np.zeros((n, n))
    bcal = np.block([
        [p.B0 @ c.R0inv @ p.B0.T, p.B0 @ c.R0inv @ w.B1bar.T, Zmm, Zmm],
        [w.B1bar @ c.R0inv @ p.B0.T, w.B1bar @ c.R0inv @ w.B1bar.T, Zmm, S],
        [Zmm, Zmm, Zmm, Zmm],
        [Zmm, S, Zmm, Zmm],
    ])
    hcal = np.block([
        [p.H0, -p.H0 @ p.Gamma0bar, Zmm, Zmm],
        [-p.Gamma0bar.T @ p.H0, p.Gamma0bar.T @ p.H0 @ p.Gamma0bar, Zmm, Zmm],
        [Zmm, Zmm, Zmm, Zmm],
        [Zmm, Zmm, Zmm, Zmm],
    ])
    zd = np.zeros_like(p.D0)
    dcal0 = np.vstack([p.D0, zd, zd, zd])
    return AugSystem(
        params=params, weights=w,
        Acal=MatrixPath(grid, acal), Qcal=MatrixPath(grid, qcal),
        Dbar0=MatrixPath(grid, dbar0),
        Bcal=bcal, Hcal=hcal, Dcal0=dcal0,
    )


def solve_leader_riccati(aug: AugSystem, grid: TimeGrid):
    """Symmetric augmented Riccati solve with terminal value Hcal.

    The cascade couples one-way into this equation, so the RK4 stages use
    prebuilt coefficient values: exact cascade solutions at the nodes and
    4-point cubic midpoints (O(dt^4)) at the half-steps, which keeps the
    march at the cascade's own order without re-integrating it.
    """
    a_nodes = aug.Acal.values
    q_nodes = aug.Qcal.values
    a_half = half_node_values(a_nodes)
    q_half = half_node_values(q_nodes)
    bcal = aug.Bcal
    dt = grid.dt
    nodes = grid.num_nodes

    def bracket(a, q, pc):
        return pc @ a + a.T @ pc - pc @ bcal @ pc - q

    out = np.empty((nodes,) + aug.Hcal.shape)
    pc = aug.Hcal
    out[-1] = pc
    for k in range(nodes - 1, 0, -1):
        k1 = bracket(a_nodes[k], q_nodes[k], pc)
        k2 = bracket(a_half[k - 1], q_half[k - 1], pc + 0.5 * dt * k1)
        k3 = bracket(a_half[k - 1], q_half[k - 1], pc + 0.5 * dt * k2)
        k4 = bracket(a_nodes[k - 1], q_nodes[k - 1], pc + dt * k3)
        pc = pc + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(pc).all() or np.max(np.abs(pc)) > BLOWUP_LIMIT:
            raise BlowUpError(
                f"augmented leader Riccati equation blew up near "
                f"t={(k - 1) * dt:.6g} ((A3) fails numerically on [0,T])",
                t=(k - 1) * dt,
            )
        out[k - 1] = pc
    pcal = MatrixPath(grid, out)
    zvals = pcal.values @ aug.Dcal0 + aug.Dbar0.values
    return pcal, MatrixPath(grid, zvals)


def open_loop_gains(params: ModelParams, pibar: MatrixPath, m: MatrixPath,
                    m0: MatrixPath, pi0: MatrixPath, pi: MatrixPath,
                    pcal: MatrixPath, grid: TimeGrid) -> OpenLoopGains:
    """Gain paths of the decentralized control laws."""
    c = _Coeffs(params)
    p, w = params, c.w
    n, mdim = p.n, p.m
    nodes = grid.num_nodes

    left = np.hstack([p.B0.T, w.B1bar.T, np.zeros((mdim, 2 * n))])  # m x 4n
    phi0 = np.empty((nodes, mdim, 4 * n))
    for k in range(nodes):
        Xi0 = pi0.values[k] @ w.B1bar + m0.values[k] @ p.B0
        Xibar = pibar.values[k] @ w.B1bar + m.values[k] @ p.B0
        right = np.hstack([np.zeros((mdim, 2 * n)), Xi0.T, Xibar.T])
        phi0[k] = -c.R0inv @ (left @ pcal.values[k] + right)

    RB = c.Rinv @ p.B.T
    on_xibar = -(RB[None, :, :] @ pi.values)
    on_xbar = -(RB[None, :, :] @ (pibar.values - pi.values))
    on_x0 = -(RB[None, :, :] @ m.values)
    return OpenLoopGains(
        phi0=MatrixPath(grid, phi0),
        on_xibar=MatrixPath(grid, on_xibar),
        on_xbar=MatrixPath(grid, on_xbar),
        on_x0=MatrixPath(grid, on_x0),
        on_phibar=-RB,
        on_u0=-c.Rinv @ p.L,
    )


def solve_open_loop(params: ModelParams, grid: TimeGrid,
                    cascade: tuple | None = None) -> OpenLoopSolution:
    """Full open-loop solve. `cascade` may carry a precomputed
    (pi, pibar, m, m0, pi0) tuple - it does not depend on Gamma0/Q0/R0, so
    sweeps over the leader's tracking weight reuse it."""
    if cascade is None:
        pi = solve_pi(params, grid)
        pibar, m, m0, pi0 = solve_meanfield_riccati(params, grid)
    else:
        pi, pibar, m, m0, pi0 = cascade
    aug = build_augmented(params, pibar, m, m0, pi0, grid)
    pcal, zpath = solve_leader_riccati(aug, grid)
    gains = open_loop_gains(params, pibar, m, m0, pi0, pi, pcal, grid)
    return OpenLoopSolution(
        grid=grid, pi=pi, pibar=pibar, m=m, m0=m0, pi0=pi0,
        aug=aug, pcal=pcal, zpath=zpath, gains=gains,
    )


def follower_cascade(params: ModelParams, grid: TimeGrid) -> tuple:
    """(pi, pibar, m, m0, pi0), the Gamma0-independent part of the solve."""
    return (solve_pi(params, grid),) + tuple(solve_meanfield_riccati(params, grid))


def closed_loop_drift(sol: OpenLoopSolution) -> np.ndarray:
    """Per-node drift matrix Acal - Bcal @ pcal of the augmented forward SDE."""
    return sol.aug.Acal.values - sol.aug.Bcal[None, :, :] @ sol.pcal.values


def decoupling_residual(params: ModelParams, sol: OpenLoopSolution, bundle) -> np.ndarray:
    """Total discrete defect, per follower, of the reconstructed follower
    adjoint against its backward equation along a simulated bundle.

    The adjoint is rebuilt from the Riccati paths and the bundle's auxiliary
    states; its increments are compared with the drift plus the martingale
    increments implied by the decoupling.  The result shrinks at first order
    in the step size when the simulated system is consistent.
    """
    w = derive_weights(params)
    n = params.n
    dt = bundle.grid.dt
    X, Y = bundle.Xpath, bundle.Ypath
    xb0, xb = X[:, :n], X[:, n:2 * n]
    phib0, phib = Y[:, 2 * n:3 * n], Y[:, 3 * n:]
    pi, pibar = sol.pi.values, sol.pibar.values
    m, m0, pi0 = sol.m.values, sol.m0.values, sol.pi0.values
    xibar = bundle.xibarpaths
    p_i = (np.einsum("kij,knj->kni", pi, xibar)
           + (np.einsum("kij,kj->ki", pibar - pi, xb)
              + np.einsum("kij,kj->ki", m, xb0) + phib)[:, None, :])
    p_bar = (np.einsum("kij,kj->ki", pibar, xb)
             + np.einsum("kij,kj->ki", m, xb0) + phib)
    p_0 = (np.einsum("kij,kj->ki", pi0, xb)
           + np.einsum("kij,kj->ki", m0, xb0) + phib0)
    drift = -(np.einsum("ji,knj->kni", params.A, p_i)
              + (np.einsum("ji,kj->ki", params.G, p_bar)
                 + np.einsum("ji,kj->ki", params.G0, p_0))[:, None, :]
              + np.einsum("ij,knj->kni", params.Q, xibar)
              - (np.einsum("ij,kj->ki", w.Q_Gamma, xb)
                 + np.einsum("ij,kj->ki", w.Q_Gamma1, xb0))[:, None, :])
    qbar0 = sol.zpath.values[:, 3 * n:, :]
    dWi = np.moveaxis(bundle.noise.bundle.followers, 1, 0)
    dW0 = bundle.noise.bundle.w0
    mart = (np.einsum("kij,jl,knl->kni", pi[:-1], params.D, dWi)
            + np.einsum("kil,kl->ki", qbar0[:-1], dW0)[:, None, :])
    r = (p_i[1:] - p_i[:-1]) - drift[:-1] * dt - mart
    return np.linalg.norm(r.sum(axis=0), axis=-1)


def _block(mat: np.ndarray, i: int, j: int, n: int) -> np.ndarray:
    return mat[i * n:(i + 1) * n, j * n:(j + 1) * n]


def _qf_expect(W: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """E[x^T W x] for x ~ (mean, cov)."""
    return float(np.trace(W @ (cov + np.outer(mean, mean))))


def theoretical_costs_openloop(params: ModelParams, sol: OpenLoopSolution,
                               mc: int = 2000, seed: int = 0) -> OpenLoopCosts:
    """Limiting leader cost and average social cost of the followers.

    The leader limit and the quadratic-noise/initial-condition parts are
    exact trace formulas; the control-dependent part of m_T is a Monte Carlo
    expectation over common-noise paths of the augmented SDE.
    """
    c = _Coeffs(params)
    p, w = params, c.w
    n, grid = p.n, sol.grid
    mu0, sig0 = p.xi0_mean, p.xi0_cov
    xibar = p.xi_mean

    p0 = sol.pcal.values[0]
    p11, p12 = _block(p0, 0, 0, n), _block(p0, 0, 1, n)
    p21, p22 = _block(p0, 1, 0, n), _block(p0, 1, 1, n)
    p31, p32 = _block(p0, 2, 0, n), _block(p0, 2, 1, n)
    p41, p42 = _block(p0, 3, 0, n), _block(p0, 3, 1, n)

    # leader: E[xi0^T y0(0) + xibar^T ybar(0)] + int tr(D0^T beta0) dt
    leader = _qf_expect(p11, mu0, sig0) + float(mu0 @ p12 @ xibar)
    leader += float(xibar @ (p21 @ mu0 + p22 @ xibar))
    beta0_tr = np.einsum(
        "ij,kil,lj->k", p.D0, sol.pcal.values[:, :n, :n], p.D0
    )
    leader += trapezoid_integral(beta0_tr, grid)

    # followers: initial-condition block of the limit
    social = _qf_expect(sol.pi.values[0], xibar, p.xi_cov)
    social += float(xibar @ (sol.pibar.values[0] - sol.pi.values[0]) @ xibar)
    social += _qf_expect(sol.m0.values[0], mu0, sig0)
    social += 2.0 * float(xibar @ sol.pi0.values[0] @ mu0)

    # m_T: exact initial and pure-noise terms
    m_T = 2.0 * float(xibar @ (p41 @ mu0 + p42 @ xibar))
    m_T += 2.0 * (_qf_expect(p31, mu0, sig0) + float(mu0 @ p32 @ xibar))
    noise_tr = np.einsum("ij,kil,lj->k", p.D, sol.pi.values, p.D)
    noise_tr = noise_tr + np.einsum("ij,kil,lj->k", p.D0, sol.m0.values, p.D0)
    # q0bar^0 - M0 D0 is the third block of pcal @ Dcal0 (avoids cancellation)
    noise_tr = noise_tr + np.einsum(
        "ij,kil,lj->k", p.D0, sol.pcal.values[:, 2 * n:3 * n, :n], p.D0
    )
    m_T += trapezoid_integral(noise_tr, grid)

    # m_T: control-coupled part, Monte Carlo over W0 paths of the X-SDE
    stoch_mean, stoch_err = _m_T_stochastic(params, sol, mc, seed)
    m_T += stoch_mean

    return OpenLoopCosts(
        leader=leader,
        social_per_follower=social + m_T,
        m_T=m_T,
        m_T_stderr=stoch_err,
        mc_paths=mc,
    )


def _m_T_stochastic(params: ModelParams, sol: OpenLoopSolution,
                    mc: int, seed: int) -> tuple[float, float]:
    """E int [2 phibar0^T B0 u0 - 2 phibar^T B R^-1 L u0 - |B^T phibar|^2_{R^-1}
    + |u0|^2_{R1} - |L u0|^2_{R^-1}] dt, by Monte Carlo on the X-SDE."""
    c = _Coeffs(params)
    p = params
    n, grid = p.n, sol.grid
    dt = grid.dt
    rng = np.random.default_rng([seed, 0xA1])
    fac = cov_factor(p.xi0_cov)
    xi0 = p.xi0_mean + rng.standard_normal((mc, n)) @ fac.T
    dW0 = rng.standard_normal((mc, grid.num_steps, p.d)) * math.sqrt(dt)

    X = np.zeros((mc, 4 * n))
    X[:, :n] = xi0
    X[:, n:2 * n] = p.xi_mean

    acl = closed_loop_drift(sol)
    phi0 = sol.gains.phi0.values
    pcal = sol.pcal.values
    dcal_T = sol.aug.Dcal0.T

    BRL = p.B @ c.Rinv @ p.L       # n x m
    B0 = p.B0
    B = p.B
    Rinv, R1 = c.Rinv, p.R1
    LT = p.L.T

    totals = np.zeros(mc)
    for k in range(grid.num_nodes):
        u0 = X @ phi0[k].T
        Y = X @ pcal[k].T
        ph0 = Y[:, 2 * n:3 * n]
        ph = Y[:, 3 * n:]
        g = 2.0 * np.einsum("bi,bi->b", ph0, u0 @ B0.T)
        g -= 2.0 * np.einsum("bi,bi->b", ph, u0 @ BRL.T)
        btph = ph @ B
        g -= np.einsum("bi,bi->b", btph @ Rinv, btph)
        g += np.einsum("bi,bi->b", u0 @ R1, u0)
        lu = u0 @ LT
        g -= np.einsum("bi,bi->b", lu @ Rinv, lu)
        weight = 0.5 if k in (0, grid.num_nodes - 1) else 1.0
        totals += weight * dt * g
        if k < grid.num_steps:
            X = X + (X @ acl[k].T) * dt + dW0[:, k] @ dcal_T
    mean = math.fsum(totals) / mc
    if mc >= 2:
        var = math.fsum((t - mean) ** 2 for t in totals) / (mc - 1)
        stderr = math.sqrt(var / mc)
    else:
        stderr = float("nan")
    return mean, stderr
