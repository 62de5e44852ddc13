"""Population trajectory generation under the open-loop or feedback strategy
profile: explicit Euler-Maruyama on the realized dynamics together with the
auxiliary mean-field states each strategy needs.

The integrator kernels are batched over Monte-Carlo runs; a single
realization is the batch of size one, so results never depend on how an
ensemble is chunked.  Every run draws its own noise and initial conditions
from its own seed, and the same draw feeds both strategy modes when runs
are paired.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feedback import FeedbackSolution, feedback_gains
from .grid import BlowUpError, BrownianBundle, TimeGrid, cov_factor, sample_brownian
from .model import ModelParams
from .openloop import OpenLoopSolution, closed_loop_drift


@dataclass(frozen=True)
class SimNoise:
    """One run's randomness: Brownian increments plus initial draws."""

    seed: int
    bundle: BrownianBundle
    xi0: np.ndarray
    xis: np.ndarray


def draw_noise(params: ModelParams, N: int, grid: TimeGrid, seed: int) -> SimNoise:
    """Sample the Brownian bundle (sources W0, W1..WN) and Gaussian initial
    conditions; both strategy modes of a paired comparison consume the same
    draw."""
    if N < 1:
        raise ValueError("follower count N must be at least 1")
    bundle = sample_brownian(seed, N + 1, params.d, grid)
    rng = np.random.default_rng([seed, 0xC0FFEE])
    xi0 = params.xi0_mean + rng.standard_normal(params.n) @ cov_factor(params.xi0_cov).T
    xis = params.xi_mean + rng.standard_normal((N, params.n)) @ cov_factor(params.xi_cov).T
    return SimNoise(seed=seed, bundle=bundle, xi0=xi0, xis=xis)


@dataclass
class TrajectoryBundle:
    """One simulated population realization (node-indexed arrays)."""

    mode: str
    grid: TimeGrid
    noise: SimNoise
    x0path: np.ndarray       # (nodes, n) realized leader state
    xipaths: np.ndarray      # (nodes, N, n) realized follower states
    xbarpath: np.ndarray     # (nodes, n) mean-field state
    xNpath: np.ndarray       # (nodes, n) follower state average
    u0path: np.ndarray       # (nodes, m)
    uipaths: np.ndarray      # (nodes, N, m)
    Xpath: np.ndarray | None = None       # (nodes, 4n) augmented state (open loop)
    Ypath: np.ndarray | None = None       # (nodes, 4n) adjoint P X (open loop)
    xibarpaths: np.ndarray | None = None  # (nodes, N, n) follower auxiliaries

    @property
    def num_followers(self) -> int:
        return self.xipaths.shape[1]


def _stack_noise(noises: list[SimNoise], N: int):
    dW0 = np.stack([s.bundle.w0 for s in noises])                  # (B, steps, d)
    dWi = np.stack([s.bundle.followers for s in noises], axis=0)   # (B, N, steps, d)
    dWi = np.ascontiguousarray(np.moveaxis(dWi, 2, 1))             # (B, steps, N, d)
    xi0 = np.stack([s.xi0 for s in noises])
    xis = np.stack([s.xis for s in noises])
    if xis.shape[1] != N:
        raise ValueError("noise was drawn for a different follower count")
    return dW0, dWi, xi0, xis


def _check_finite(arr: np.ndarray, node: int, what: str):
    if not np.isfinite(arr).all():
        raise BlowUpError(f"{what} became non-finite at node {node}", t=None)


def simulate_openloop_batch(params: ModelParams, sol: OpenLoopSolution,
                            N: int, noises: list[SimNoise]) -> list[TrajectoryBundle]:
    """Euler-Maruyama march of the open-loop profile for a batch of runs.

    Order per step: march the augmented common-noise state, extract the
    leader control and the mean-field blocks, march the follower
    auxiliaries, then advance the realized leader/follower states with the
    same increments.  All controls are evaluated at the current node before
    any state moves (explicit scheme).
    """
    p = params
    grid = sol.grid
    n, m, d = p.n, p.m, p.d
    B = len(noises)
    dt = grid.dt
    nodes = grid.num_nodes
    dW0, dWi, xi0, xis = _stack_noise(noises, N)

    acl = closed_loop_drift(sol)
    pcal = sol.pcal.values
    phi0 = sol.gains.phi0.values
    on_xibar = sol.gains.on_xibar.values
    on_xbar = sol.gains.on_xbar.values
    on_x0 = sol.gains.on_x0.values
    on_phibar = sol.gains.on_phibar
    on_u0 = sol.gains.on_u0
    # follower auxiliary drift coefficients (closed-loop form of the gains);
    # the B1bar u0 feedthrough keeps the auxiliaries consistent with the
    # mean-field state they average to
    a_xi = p.A[None] + p.B[None] @ on_xibar
    b_xbar = p.G[None] + p.B[None] @ on_xbar
    b_x0 = p.F[None] + p.B[None] @ on_x0
    b_phi = p.B @ on_phibar
    b1bar = sol.aug.weights.B1bar
    dcalT = sol.aug.Dcal0.T

    X = np.zeros((B, 4 * n))
    X[:, :n] = xi0
    X[:, n:2 * n] = p.xi_mean
    xibar = xis.copy()
    x0 = xi0.copy()
    xi = xis.copy()

    out_X = np.empty((nodes, B, 4 * n))
    out_Y = np.empty((nodes, B, 4 * n))
    out_u0 = np.empty((nodes, B, m))
    out_ui = np.empty((nodes, B, N, m))
    out_x0 = np.empty((nodes, B, n))
    out_xi = np.empty((nodes, B, N, n))
    out_xibar = np.empty((nodes, B, N, n))
    out_xN = np.empty((nodes, B, n))

    for k in range(nodes):
        Y = X @ pcal[k].T
        phibar = Y[:, 3 * n:]
        u0 = X @ phi0[k].T
        xb0 = X[:, :n]
        xb = X[:, n:2 * n]
        shared = xb @ on_xbar[k].T + xb0 @ on_x0[k].T \
            + phibar @ on_phibar.T + u0 @ on_u0.T
        ui = xibar @ on_xibar[k].T + shared[:, None, :]
        xN = xi.mean(axis=1)

        out_X[k] = X
        out_Y[k] = Y
        out_u0[k] = u0
        out_ui[k] = ui
        out_x0[k] = x0
        out_xi[k] = xi
        out_xibar[k] = xibar
        out_xN[k] = xN

        if k == nodes - 1:
            break
        w0 = dW0[:, k]
        wi = dWi[:, k]
        shared_aux = xb @ b_xbar[k].T + xb0 @ b_x0[k].T + phibar @ b_phi.T \
            + u0 @ b1bar.T
        X_new = X + (X @ acl[k].T) * dt + w0 @ dcalT
        xibar_new = xibar + (xibar @ a_xi[k].T + shared_aux[:, None, :]) * dt \
            + wi @ p.D.T
        x0_new = x0 + (x0 @ p.A0.T + u0 @ p.B0.T + xN @ p.G0.T) * dt + w0 @ p.D0.T
        xi_new = xi + (xi @ p.A.T + ui @ p.B.T
                       + (xN @ p.G.T + x0 @ p.F.T + u0 @ p.B1.T)[:, None, :]) * dt \
            + wi @ p.D.T
        X, xibar, x0, xi = X_new, xibar_new, x0_new, xi_new
        if k % 64 == 0 or k == nodes - 2:
            _check_finite(xi, k + 1, "open-loop follower state")
            _check_finite(X, k + 1, "augmented common-noise state")

    return [
        TrajectoryBundle(
            mode="openloop", grid=grid, noise=noises[b],
            x0path=out_x0[:, b], xipaths=out_xi[:, b],
            xbarpath=out_X[:, b, n:2 * n], xNpath=out_xN[:, b],
            u0path=out_u0[:, b], uipaths=out_ui[:, b],
            Xpath=out_X[:, b], Ypath=out_Y[:, b], xibarpaths=out_xibar[:, b],
        )
        for b in range(B)
    ]


def simulate_feedback_batch(params: ModelParams, sol: FeedbackSolution,
                            N: int, noises: list[SimNoise]) -> list[TrajectoryBundle]:
    """Euler-Maruyama march of the feedback profile: the mean-field state is
    driven by the realized leader state, and all controls feed back on
    realized states."""
    p = params
    grid = sol.grid
    n, m = p.n, p.m
    B = len(noises)
    dt = grid.dt
    nodes = grid.num_nodes
    dW0, dWi, xi0, xis = _stack_noise(noises, N)

    gains = feedback_gains(params, sol)
    p0 = gains.p0.values
    pbar = gains.pbar.values
    on_xi = gains.on_xi.values
    on_x0 = gains.on_x0.values
    on_xbar = gains.on_xbar.values
    abar = sol.abar.values
    fbar = sol.fbar.values

    x0 = xi0.copy()
    xbar = np.broadcast_to(p.xi_mean, (B, n)).copy()
    xi = xis.copy()

    out_u0 = np.empty((nodes, B, m))
    out_ui = np.empty((nodes, B, N, m))
    out_x0 = np.empty((nodes, B, n))
    out_xi = np.empty((nodes, B, N, n))
    out_xbar = np.empty((nodes, B, n))
    out_xN = np.empty((nodes, B, n))

    for k in range(nodes):
        u0 = x0 @ p0[k].T + xbar @ pbar[k].T
        ui = xi @ on_xi[k].T + (x0 @ on_x0[k].T + xbar @ on_xbar[k].T)[:, None, :]
        xN = xi.mean(axis=1)

        out_u0[k] = u0
        out_ui[k] = ui
        out_x0[k] = x0
        out_xi[k] = xi
        out_xbar[k] = xbar
        out_xN[k] = xN

        if k == nodes - 1:
            break
        w0 = dW0[:, k]
        wi = dWi[:, k]
        xbar_new = xbar + (xbar @ abar[k].T + x0 @ fbar[k].T) * dt
        x0_new = x0 + (x0 @ p.A0.T + u0 @ p.B0.T + xN @ p.G0.T) * dt + w0 @ p.D0.T
        xi_new = xi + (xi @ p.A.T + ui @ p.B.T
                       + (xN @ p.G.T + x0 @ p.F.T + u0 @ p.B1.T)[:, None, :]) * dt \
            + wi @ p.D.T
        xbar, x0, xi = xbar_new, x0_new, xi_new
        if k % 64 == 0 or k == nodes - 2:
            _check_finite(xi, k + 1, "feedback follower state")

    return [
        TrajectoryBundle(
            mode="feedback", grid=grid, noise=noises[b],
            x0path=out_x0[:, b], xipaths=out_xi[:, b],
            xbarpath=out_xbar[:, b], xNpath=out_xN[:, b],
            u0path=out_u0[:, b], uipaths=out_ui[:, b],
        )
        for b in range(B)
    ]


def _resolve_noise(params, N, grid, seed_or_noise) -> SimNoise:
    if isinstance(seed_or_noise, SimNoise):
        return seed_or_noise
    return draw_noise(params, N, grid, int(seed_or_noise))


def simulate_openloop(params: ModelParams, sol: OpenLoopSolution, N: int,
                      seed_or_noise) -> TrajectoryBundle:
    noise = _resolve_noise(params, N, sol.grid, seed_or_noise)
    return simulate_openloop_batch(params, sol, N, [noise])[0]


def simulate_feedback(params: ModelParams, sol: FeedbackSolution, N: int,
                      seed_or_noise) -> TrajectoryBundle:
    noise = _resolve_noise(params, N, sol.grid, seed_or_noise)
    return simulate_feedback_batch(params, sol, N, [noise])[0]


@dataclass(frozen=True)
class GapResult:
    sup_gap2: float
    gap_path: np.ndarray  # (nodes,) squared gap per node


def meanfield_gap(bundle: TrajectoryBundle) -> GapResult:
    """Squared distance between the follower average and the mean-field
    state, per node and at its supremum over the horizon."""
    diff = bundle.xNpath - bundle.xbarpath
    gap = np.einsum("ki,ki->k", diff, diff)
    return GapResult(sup_gap2=float(gap.max()), gap_path=gap)
