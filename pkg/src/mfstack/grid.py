"""Uniform time grid, time-indexed matrix paths, Brownian increments, and the
deterministic/stochastic steppers shared by every solver module.

All integrators are pure functions of their inputs: the same arguments
(including seeds) always reproduce bit-identical paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Any entry beyond this magnitude is treated as a finite-escape-time blow-up
# rather than a representable solution (Riccati solvability failure).
BLOWUP_LIMIT = 1e12


class BlowUpError(RuntimeError):
    """A path left the representable range (non-finite or |entry| > 1e12)."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with node k at time k*dt."""

    t_end: float
    dt: float
    num_nodes: int
    t_start: float = 0.0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.num_nodes < 2:
            raise ValueError(f"need at least 2 nodes, got {self.num_nodes}")
        span = self.t_start + (self.num_nodes - 1) * self.dt - self.t_end
        if abs(span) > 1e-12 * max(abs(self.t_end), 1.0):
            raise ValueError(
                f"grid does not close: t_start + (num_nodes-1)*dt differs from "
                f"t_end by {span:.3e}"
            )

    @classmethod
    def from_horizon(cls, T: float, dt: float) -> "TimeGrid":
        num_nodes = int(round(T / dt)) + 1
        return cls(t_end=T, dt=dt, num_nodes=num_nodes)

    @property
    def num_steps(self) -> int:
        return self.num_nodes - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.num_nodes) * self.dt

    def refined(self, factor: int = 2) -> "TimeGrid":
        """Grid on the same horizon with dt/factor."""
        return TimeGrid(
            t_end=self.t_end,
            dt=self.dt / factor,
            num_nodes=self.num_steps * factor + 1,
        )


@dataclass(frozen=True)
class MatrixPath:
    """Time-indexed array of same-shaped real matrices (or vectors) on a grid.

    values[k] is the entry at node k; the array is frozen after construction.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[0] != self.grid.num_nodes:
            raise ValueError(
                f"path has {vals.shape[0]} entries for a grid of "
                f"{self.grid.num_nodes} nodes"
            )
        if not np.all(np.isfinite(vals)):
            raise BlowUpError("MatrixPath contains non-finite entries")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def entry_shape(self) -> tuple:
        return self.values.shape[1:]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation between nodes; only for off-node consumers."""
        s = t / self.grid.dt
        k = int(np.floor(s))
        k = min(max(k, 0), self.grid.num_nodes - 2)
        w = s - k
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]


@dataclass(frozen=True)
class BrownianBundle:
    """Per-source Brownian increments on a grid: source 0 is the common noise
    W0, sources 1..N belong to the followers.

    increments has shape (num_sources, num_steps, d); each entry is an
    i.i.d. N(0, dt*I_d) increment, regenerated bit-identically from the seed.
    """

    seed: int
    grid: TimeGrid
    increments: np.ndarray = field(repr=False)

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 3 or inc.shape[1] != self.grid.num_steps:
            raise ValueError(f"bad increment array shape {inc.shape}")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def num_sources(self) -> int:
        return self.increments.shape[0]

    @property
    def w0(self) -> np.ndarray:
        return self.increments[0]

    @property
    def followers(self) -> np.ndarray:
        return self.increments[1:]


def sample_brownian(seed: int, num_sources: int, d: int, grid: TimeGrid) -> BrownianBundle:
    rng = np.random.default_rng(seed)
    inc = rng.standard_normal((num_sources, grid.num_steps, d)) * np.sqrt(grid.dt)
    return BrownianBundle(seed=seed, grid=grid, increments=inc)


def _as_tuple(x) -> tuple:
    if isinstance(x, (tuple, list)):
        return tuple(np.asarray(v, dtype=float) for v in x)
    return (np.asarray(x, dtype=float),)


def _check_entries(vals: tuple, t: float, direction: str):
    for v in vals:
        if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP_LIMIT:
            raise BlowUpError(
                f"{direction} integration blew up near t={t:.6g} "
                f"(entry magnitude above {BLOWUP_LIMIT:.0e} or non-finite); "
                f"the terminal-value problem has no solution on the horizon",
                t=t,
            )


def _rk4_march(rhs, start_values: tuple, grid: TimeGrid, backward: bool):
    """Classical RK4 over a tuple of matrices, marching the whole stacked
    state through every stage. Returns (num_nodes, ...) arrays per component.

    `rhs` always gives the rate of change along the direction of the march,
    so a backward march integrates dx/ds = rhs with s = t_end - t.
    """
    vals = _as_tuple(start_values)
    n_comp = len(vals)
    # a backward march integrates dx/ds = rhs with s the remaining time, so
    # the step amplitude is +dt either way; only the clock runs backward
    h_t = -grid.dt if backward else grid.dt
    dt = grid.dt
    ks = range(grid.num_nodes - 1, 0, -1) if backward else range(grid.num_nodes - 1)
    start_node = grid.num_nodes - 1 if backward else 0

    uniform = len({v.shape for v in vals}) == 1
    if uniform:
        # stacked state: the RK4 combination arithmetic runs once on one
        # array instead of once per component
        shape = vals[0].shape
        out_s = np.empty((grid.num_nodes, n_comp) + shape)
        y = np.stack(vals)
        out_s[start_node] = y

        def f(t, ys):
            if n_comp == 1:
                return np.asarray(rhs(t, ys[0]), dtype=float)[None]
            return np.stack(rhs(t, tuple(ys)))

        for k in ks:
            t = k * grid.dt
            k1 = f(t, y)
            k2 = f(t + 0.5 * h_t, y + (0.5 * dt) * k1)
            k3 = f(t + 0.5 * h_t, y + (0.5 * dt) * k2)
            k4 = f(t + h_t, y + dt * k3)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            _check_entries((y,), t + h_t, "backward" if backward else "forward")
            out_s[k - 1 if backward else k + 1] = y
        return [out_s[:, i] for i in range(n_comp)]

    out = [np.empty((grid.num_nodes,) + v.shape) for v in vals]
    for i in range(n_comp):
        out[i][start_node] = vals[i]

    def f(t, y):
        return _as_tuple(rhs(t, y if n_comp > 1 else y[0]))

    y = vals
    for k in ks:
        t = k * grid.dt
        k1 = f(t, y)
        k2 = f(t + 0.5 * h_t, tuple(y[i] + 0.5 * dt * k1[i] for i in range(n_comp)))
        k3 = f(t + 0.5 * h_t, tuple(y[i] + 0.5 * dt * k2[i] for i in range(n_comp)))
        k4 = f(t + h_t, tuple(y[i] + dt * k3[i] for i in range(n_comp)))
        y = tuple(
            y[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            for i in range(n_comp)
        )
        _check_entries(y, t + h_t, "backward" if backward else "forward")
        node = k - 1 if backward else k + 1
        for i in range(n_comp):
            out[i][node] = y[i]
    return out


def integrate_backward(rhs, terminal, grid: TimeGrid):
    """RK4 march of a terminal-value matrix ODE system from t_end to t_start.

    rhs(t, state) is the derivative with respect to remaining time s = T - t,
    so a Riccati equation written as dP/dt + F(t, P) = 0 is solved by passing
    rhs = F directly.  rhs must return the same structure as `terminal` (a
    single matrix or a tuple of matrices).  The stored path satisfies
    path.values[-1] == terminal exactly.
    """
    arrays = _rk4_march(rhs, terminal, grid, backward=True)
    paths = tuple(MatrixPath(grid, a) for a in arrays)
    return paths if len(paths) > 1 else paths[0]


def integrate_forward_ode(rhs, initial, grid: TimeGrid):
    """Initial-value mirror of integrate_backward."""
    arrays = _rk4_march(rhs, initial, grid, backward=False)
    paths = tuple(MatrixPath(grid, a) for a in arrays)
    return paths if len(paths) > 1 else paths[0]


def euler_maruyama_path(drift, diffusion, initial, increments, grid: TimeGrid) -> MatrixPath:
    """Explicit Euler-Maruyama march of dx = drift(t,x) dt + sum_j D_j dW_j.

    diffusion: one n-by-d matrix or a list of them, one per noise source;
    increments: matching (num_steps, d) array or list of arrays.  One drift
    evaluation per step.
    """
    diffs = diffusion if isinstance(diffusion, (list, tuple)) else [diffusion]
    incs = increments if isinstance(increments, (list, tuple)) else [increments]
    if len(diffs) != len(incs):
        raise ValueError("need one increment array per diffusion matrix")
    diffs = [np.atleast_2d(np.asarray(D, dtype=float)) for D in diffs]
    incs = [np.asarray(w, dtype=float) for w in incs]
    for D, w in zip(diffs, incs):
        if w.shape != (grid.num_steps, D.shape[1]):
            raise ValueError(
                f"increments of shape {w.shape} do not match {grid.num_steps} "
                f"steps of a {D.shape[1]}-dimensional source"
            )
    x = np.asarray(initial, dtype=float)
    out = np.empty((grid.num_nodes,) + x.shape)
    out[0] = x
    dt = grid.dt
    for k in range(grid.num_steps):
        t = k * dt
        x = x + np.asarray(drift(t, x), dtype=float) * dt
        for D, w in zip(diffs, incs):
            x = x + w[k] @ D.T
        if not np.all(np.isfinite(x)):
            raise BlowUpError(f"Euler-Maruyama state became non-finite at node {k + 1}", t=t + dt)
        out[k + 1] = x
    return MatrixPath(grid, out)


def half_node_values(vals: np.ndarray) -> np.ndarray:
    """Values at the midpoints of a node-sampled path via 4-point cubic
    stencils (O(dt^4)), so RK4 stage coefficients keep their order.
    """
    vals = np.asarray(vals, dtype=float)
    nodes = vals.shape[0]
    if nodes == 2:
        return 0.5 * (vals[:1] + vals[1:])
    mid = np.empty((nodes - 1,) + vals.shape[1:])
    mid[1:-1] = (-vals[:-3] + 9.0 * vals[1:-2] + 9.0 * vals[2:-1] - vals[3:]) / 16.0
    mid[0] = (5.0 * vals[0] + 15.0 * vals[1] - 5.0 * vals[2] + vals[3]) / 16.0
    mid[-1] = (vals[-4] - 5.0 * vals[-3] + 15.0 * vals[-2] + 5.0 * vals[-1]) / 16.0
    return mid


def cov_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix square-root factor for sampling N(0, cov); Cholesky when the
    covariance is definite, eigenvalue square root (clipped at 0) otherwise.
    """
    cov = np.asarray(cov, dtype=float)
    if np.allclose(cov, 0.0):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None)))


def trapezoid_integral(path, grid: TimeGrid | None = None) -> float:
    """Composite trapezoid of a scalar-valued path; exact for affine paths."""
    if isinstance(path, MatrixPath):
        grid = path.grid
        vals = path.values
    else:
        vals = np.asarray(path, dtype=float)
        if grid is None:
            raise ValueError("grid required when integrating a bare array")
    f = vals.reshape(grid.num_nodes, -1)
    if f.shape[1] != 1:
        raise ValueError("trapezoid_integral needs a scalar-valued path")
    f = f[:, 0]
    if not np.all(np.isfinite(f)):
        raise BlowUpError("non-finite integrand")
    return float(grid.dt * (0.5 * (f[0] + f[-1]) + f[1:-1].sum()))
