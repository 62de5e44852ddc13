"""Model data for the leader/follower game: every system and cost matrix,
the derived tracking weights, standing-assumption checks, and the flat
key=value config format that round-trips all of it bit-exactly.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, replace

import numpy as np

# Floating-point-safe boundary for semidefiniteness verdicts.
EIG_TOL = 1e-10


class ConfigError(ValueError):
    """Raised on malformed config input, carrying the offending line/key."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        loc = f" (line {line})" if line is not None else ""
        who = f" [key {key}]" if key else ""
        super().__init__(f"{message}{loc}{who}")
        self.line = line
        self.key = key


def _mat(x, rows: int, cols: int, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1) if cols == 1 else a.reshape(1, -1)
    if a.shape != (rows, cols):
        raise ValueError(f"{name} must be {rows}x{cols}, got {a.shape}")
    a = a.copy()
    a.setflags(write=False)
    return a


def _vec(x, n: int, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"{name} must have length {n}, got {a.shape}")
    a = a.copy()
    a.setflags(write=False)
    return a


def _require_symmetric(a: np.ndarray, name: str):
    if a.shape[0] != a.shape[1] or np.max(np.abs(a - a.T)) > 1e-12 * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"{name} must be symmetric")


@dataclass(frozen=True)
class ModelParams:
    """All constant model data: leader block, follower block, initial
    distribution moments, horizon T and follower count N.
    """

    # leader
    A0: np.ndarray
    B0: np.ndarray
    G0: np.ndarray
    D0: np.ndarray
    Q0: np.ndarray
    R0: np.ndarray
    Gamma0: np.ndarray
    # follower
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    F: np.ndarray
    B1: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    L: np.ndarray
    R1: np.ndarray
    Gamma: np.ndarray
    Gamma1: np.ndarray
    # terminal weights (0 when a scenario does not state them)
    H0: np.ndarray
    H: np.ndarray
    Gamma0bar: np.ndarray
    Gammabar: np.ndarray
    Gamma1bar: np.ndarray
    # initial distribution
    xi0_mean: np.ndarray
    xi0_cov: np.ndarray
    xi_mean: np.ndarray
    xi_cov: np.ndarray
    # scenario scale
    T: float = 1.0
    N: int = 20

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        return self.D.shape[1]

    def __post_init__(self):
        n = np.atleast_2d(np.asarray(self.A, dtype=float)).shape[0]
        m = np.atleast_2d(np.asarray(self.B, dtype=float)).shape[-1]
        if np.asarray(self.B, dtype=float).ndim == 0:
            m = 1
        d = np.atleast_2d(np.asarray(self.D, dtype=float)).shape[-1]
        if np.asarray(self.D, dtype=float).ndim == 0:
            d = 1
        shapes = {
            "A0": (n, n), "B0": (n, m), "G0": (n, n), "D0": (n, d),
            "Q0": (n, n), "R0": (m, m), "Gamma0": (n, n),
            "A": (n, n), "B": (n, m), "G": (n, n), "F": (n, n),
            "B1": (n, m), "D": (n, d), "Q": (n, n), "R": (m, m),
            "L": (m, m), "R1": (m, m), "Gamma": (n, n), "Gamma1": (n, n),
            "H0": (n, n), "H": (n, n), "Gamma0bar": (n, n),
            "Gammabar": (n, n), "Gamma1bar": (n, n),
            "xi0_cov": (n, n), "xi_cov": (n, n),
        }
        for name, (r, c) in shapes.items():
            object.__setattr__(self, name, _mat(getattr(self, name), r, c, name))
        object.__setattr__(self, "xi0_mean", _vec(self.xi0_mean, n, "xi0_mean"))
        object.__setattr__(self, "xi_mean", _vec(self.xi_mean, n, "xi_mean"))
        for name in ("Q0", "R0", "Q", "R", "R1", "H0", "H"):
            _require_symmetric(getattr(self, name), name)
        for name in ("xi0_cov", "xi_cov"):
            cov = getattr(self, name)
            _require_symmetric(cov, name)
            if np.linalg.eigvalsh(cov).min() < -EIG_TOL:
                raise ValueError(f"{name} must be positive semi-definite")
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if self.N < 1:
            raise ValueError("follower count N must be at least 1")


@dataclass(frozen=True)
class DerivedWeights:
    """Combined tracking weights and the effective leader input matrix."""

    Q_Gamma: np.ndarray
    Q_Gamma1: np.ndarray
    H_Gammabar: np.ndarray
    H_Gamma1bar: np.ndarray
    B1bar: np.ndarray


def _inv(mat: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.inv(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is singular and cannot be inverted") from None


def derive_weights(params: ModelParams) -> DerivedWeights:
    """Combined weights Q_Gamma, Q_Gamma1, H_Gammabar, H_Gamma1bar and
    B1bar = B1 - B R^{-1} L."""
    Q, G1, Gm = params.Q, params.Gamma1, params.Gamma
    H, Gb, G1b = params.H, params.Gammabar, params.Gamma1bar
    Rinv = _inv(params.R, "R")
    return DerivedWeights(
        Q_Gamma=Q @ Gm + Gm.T @ Q - Gm.T @ Q @ Gm,
        Q_Gamma1=Q @ G1 - Gm.T @ Q @ G1,
        H_Gammabar=H @ Gb + Gb.T @ H - Gb.T @ H @ Gb,
        H_Gamma1bar=H @ G1b - Gb.T @ H @ G1b,
        B1bar=params.B1 - params.B @ Rinv @ params.L,
    )


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool | None  # None: not decidable before solving
    witness: float | None
    detail: str


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple[AssumptionCheck, ...]

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def violated(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.checks if c.passed is False)


def validate_assumptions(params: ModelParams) -> AssumptionReport:
    """Check (A1)-(A4) and report verdicts with numeric witnesses; violations
    are reported, never raised - the caller decides severity."""
    checks = []

    init_eigs = [
        np.linalg.eigvalsh(params.xi0_cov).min(),
        np.linalg.eigvalsh(params.xi_cov).min(),
    ]
    second_moment = float(np.trace(params.xi_cov) + params.xi_mean @ params.xi_mean)
    checks.append(AssumptionCheck(
        "A1", min(init_eigs) >= -EIG_TOL and np.isfinite(second_moment),
        witness=float(min(init_eigs)),
        detail="independent initial draws with shared follower moments; "
               f"sup E|xi_i|^2 = {second_moment:.6g}",
    ))

    psd_eigs = {
        name: float(np.linalg.eigvalsh(getattr(params, name)).min())
        for name in ("Q0", "H0", "Q", "H")
    }
    pd_eigs = {
        name: float(np.linalg.eigvalsh(getattr(params, name)).min())
        for name in ("R0", "R")
    }
    a2_ok = all(v >= -EIG_TOL for v in psd_eigs.values()) and all(
        v >= EIG_TOL for v in pd_eigs.values()
    )
    worst = min(list(psd_eigs.values()) + list(pd_eigs.values()))
    checks.append(AssumptionCheck(
        "A2", a2_ok, witness=worst,
        detail="min eigenvalues " + ", ".join(
            f"{k}={v:.3g}" for k, v in {**psd_eigs, **pd_eigs}.items()
        ),
    ))

    checks.append(AssumptionCheck(
        "A3", None, witness=None,
        detail="solvability of the augmented leader Riccati equation is "
               "decided at solve time (blow-up detection)",
    ))

    try:
        r1inv = np.linalg.inv(params.R1)
    except np.linalg.LinAlgError:
        checks.append(AssumptionCheck(
            "A4", None, witness=None, detail="R1 is singular; R - L R1^{-1} L^T undefined",
        ))
    else:
        gap = params.R - params.L @ r1inv @ params.L.T
        w = float(np.linalg.eigvalsh(gap).min())
        checks.append(AssumptionCheck(
            "A4", w >= -EIG_TOL, witness=w,
            detail=f"min eig(R - L R1^-1 L^T) = {w:.6g}",
        ))

    return AssumptionReport(checks=tuple(checks))


@dataclass(frozen=True)
class RunSettings:
    """Per-run knobs that live next to the model in a config file."""

    dt: float = 1e-3
    num_mc: int = 200
    seed: int = 42


# Keys written/accepted by the config format, in canonical file order.
_MATRIX_KEYS = (
    "A0", "B0", "G0", "D0", "Gamma0", "Q0", "R0", "H0", "Gamma0bar",
    "A", "B", "G", "F", "B1", "D", "Gamma", "Gamma1", "Q", "R", "L", "R1",
    "H", "Gammabar", "Gamma1bar",
    "xi0_mean", "xi0_cov", "xi_mean", "xi_cov",
)
_SCALAR_KEYS = ("T", "dt", "N", "num_mc", "seed")
_OPTIONAL_ZERO = ("H0", "H", "Gamma0bar", "Gammabar", "Gamma1bar")
_OPTIONAL_MOMENTS = ("xi0_mean", "xi0_cov", "xi_mean", "xi_cov")


def _parse_value(text: str, line_no: int, key: str):
    try:
        val = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ConfigError(f"cannot parse value {text!r}", line=line_no, key=key) from None
    if isinstance(val, (int, float)):
        return float(val)
    if isinstance(val, (list, tuple)):
        try:
            arr = np.asarray(val, dtype=float)
        except ValueError:
            raise ConfigError("ragged matrix literal", line=line_no, key=key) from None
        return arr
    raise ConfigError(f"unsupported value {text!r}", line=line_no, key=key)


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines (matrices as bracketed row-major lists)."""
    out: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=line_no)
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _MATRIX_KEYS and key not in _SCALAR_KEYS:
            raise ConfigError(f"unknown key {key!r}", line=line_no, key=key)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", line=line_no, key=key)
        out[key] = _parse_value(value.strip(), line_no, key)
    return out


def params_from_dict(raw: dict) -> tuple[ModelParams, RunSettings]:
    missing = [
        key for key in _MATRIX_KEYS
        if key not in raw and key not in _OPTIONAL_ZERO and key not in _OPTIONAL_MOMENTS
    ]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    n = np.atleast_2d(np.asarray(raw["A"], dtype=float)).shape[0]
    kwargs = {}
    for key in _MATRIX_KEYS:
        if key in raw:
            kwargs[key] = raw[key]
        elif key.endswith("mean"):
            kwargs[key] = np.zeros(n)
        else:
            kwargs[key] = np.zeros((n, n))
    kwargs["T"] = float(raw.get("T", 1.0))
    kwargs["N"] = int(raw.get("N", 20))
    try:
        params = ModelParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    settings = RunSettings(
        dt=float(raw.get("dt", 1e-3)),
        num_mc=int(raw.get("num_mc", 200)),
        seed=int(raw.get("seed", 42)),
    )
    return params, settings


def load_config(path) -> tuple[ModelParams, RunSettings]:
    with open(path, "r", encoding="utf-8") as fh:
        return params_from_dict(parse_config_text(fh.read()))


def _format_value(val) -> str:
    if isinstance(val, (int, np.integer)):
        return repr(int(val))
    arr = np.asarray(val)
    if arr.ndim == 0:
        return repr(float(arr))
    if arr.ndim == 1:
        return "[" + ", ".join(repr(float(x)) for x in arr) + "]"
    rows = ("[" + ", ".join(repr(float(x)) for x in row) + "]" for row in arr)
    return "[" + ", ".join(rows) + "]"


def save_config(params: ModelParams, settings: RunSettings, path):
    """Write a config that reloads to bit-identical matrices."""
    lines = []
    for key in _MATRIX_KEYS:
        lines.append(f"{key} = {_format_value(getattr(params, key))}")
    lines.append(f"T = {_format_value(params.T)}")
    lines.append(f"dt = {_format_value(settings.dt)}")
    lines.append(f"N = {params.N}")
    lines.append(f"num_mc = {settings.num_mc}")
    lines.append(f"seed = {settings.seed}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def config_echo(params: ModelParams, settings: RunSettings) -> dict:
    """JSON-friendly echo of the resolved configuration."""
    echo = {key: np.asarray(getattr(params, key)).tolist() for key in _MATRIX_KEYS}
    echo.update(T=params.T, N=params.N, dt=settings.dt,
                num_mc=settings.num_mc, seed=settings.seed)
    return echo


def table1_scenario(T: float = 1.0, N: int = 20) -> tuple[ModelParams, RunSettings]:
    """The simulation scenario of the source experiments: scalar system,
    leader weights (A0,B0,G0,D0,Gamma0,Q0,R0) = (-1,1,0.1,1,1,1,1), follower
    block (A,B,G,F,B1,D,Gamma,Gamma1,Q,R,L,R1) = (-1,1,0.1,1,1,1,1,1,1,2,2,1),
    initial laws N(10, 2) and N(5, 1), zero terminal weights.
    """
    params = ModelParams(
        A0=-1.0, B0=1.0, G0=0.1, D0=1.0, Q0=1.0, R0=1.0, Gamma0=1.0,
        A=-1.0, B=1.0, G=0.1, F=1.0, B1=1.0, D=1.0,
        Q=1.0, R=2.0, L=2.0, R1=1.0, Gamma=1.0, Gamma1=1.0,
        H0=0.0, H=0.0, Gamma0bar=0.0, Gammabar=0.0, Gamma1bar=0.0,
        xi0_mean=[10.0], xi0_cov=[[2.0]], xi_mean=[5.0], xi_cov=[[1.0]],
        T=T, N=N,
    )
    return params, RunSettings(dt=1e-3, num_mc=200, seed=42)


def with_gamma0(params: ModelParams, gamma0: float) -> ModelParams:
    """Copy of params with the leader tracking coupling set to gamma0 * I."""
    return replace(params, Gamma0=gamma0 * np.eye(params.n))
