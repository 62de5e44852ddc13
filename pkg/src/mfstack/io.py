"""CSV and report emission.  All numeric CSV fields use the shortest
round-trip decimal representation, so a rerun with the same config and seed
reproduces every CSV byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .costs import ConvergenceResult, MeanStderr, SweepResult
from .grid import MatrixPath
from .simulate import TrajectoryBundle


def fmt(x) -> str:
    return repr(float(x))


def _fmt_or_nan(x) -> str:
    return "nan" if x is None else fmt(x)


def write_matrix_path_csv(path: MatrixPath, file_path):
    """Columns t, entry_1_1, entry_1_2, ... (row-major), one row per node."""
    vals = path.values
    if vals.ndim == 2:  # vector path: column entries
        vals = vals[:, :, None]
    _, r, c = vals.shape
    header = ["t"] + [f"entry_{i + 1}_{j + 1}" for i in range(r) for j in range(c)]
    times = path.grid.times
    with open(file_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(path.grid.num_nodes):
            row = [fmt(times[k])] + [fmt(v) for v in vals[k].ravel()]
            fh.write(",".join(row) + "\n")


def _state_cols(name: str, n: int) -> list[str]:
    return [name] if n == 1 else [f"{name}_{i + 1}" for i in range(n)]


def write_trajectory_csv(bundle: TrajectoryBundle, file_path):
    """Columns t, x0, xbar, xN_avg, u0, x_1 ... x_N (entries expanded
    row-major when the state dimension exceeds one)."""
    n = bundle.x0path.shape[1]
    m = bundle.u0path.shape[1]
    N = bundle.num_followers
    header = (["t"] + _state_cols("x0", n) + _state_cols("xbar", n)
              + _state_cols("xN_avg", n) + _state_cols("u0", m))
    for i in range(N):
        header += _state_cols(f"x_{i + 1}", n)
    times = bundle.grid.times
    with open(file_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(bundle.grid.num_nodes):
            row = [fmt(times[k])]
            row += [fmt(v) for v in bundle.x0path[k]]
            row += [fmt(v) for v in bundle.xbarpath[k]]
            row += [fmt(v) for v in bundle.xNpath[k]]
            row += [fmt(v) for v in bundle.u0path[k]]
            row += [fmt(v) for v in bundle.xipaths[k].ravel()]
            fh.write(",".join(row) + "\n")


def write_runs_csv(channels: dict[str, np.ndarray], file_path):
    """Per-run Monte-Carlo cost channels, one row per run."""
    names = list(channels)
    length = len(next(iter(channels.values())))
    with open(file_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["run"] + names) + "\n")
        for k in range(length):
            fh.write(",".join([str(k)] + [fmt(channels[n][k]) for n in names]) + "\n")


def write_sweep_csv(result: SweepResult, file_path):
    header = "gamma0,delta0_mean,delta0_stderr,delta1_mean,delta1_stderr"
    with open(file_path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in result.rows:
            if row.error is not None:
                cells = [fmt(row.gamma0), "nan", "nan", "nan", "nan"]
            else:
                cells = [
                    fmt(row.gamma0),
                    fmt(row.delta0.mean), _fmt_or_nan(row.delta0.stderr),
                    fmt(row.delta1.mean), _fmt_or_nan(row.delta1.stderr),
                ]
            fh.write(",".join(cells) + "\n")


def write_convergence_csv(result: ConvergenceResult, file_path):
    with open(file_path, "w", encoding="utf-8") as fh:
        fh.write("N,mean_sup_gap2,stderr\n")
        for row in result.rows:
            fh.write(",".join([
                str(row.N), fmt(row.mean_sup_gap2.mean),
                _fmt_or_nan(row.mean_sup_gap2.stderr),
            ]) + "\n")


@dataclass
class CostReport:
    """Realized Monte-Carlo costs next to the theoretical limits."""

    mode: str
    N: int
    num_mc: int
    seed: int
    j0_realized: MeanStderr
    jsoc_per_n_realized: MeanStderr
    j0_limit: float
    jsoc_per_n_limit: float
    notes: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        def rel(a, b):
            return abs(a - b) / abs(b) if b else float("nan")

        out = [
            f"mode = {self.mode}",
            f"N = {self.N}, num_mc = {self.num_mc}, seed = {self.seed}",
            f"leader cost realized   = {self.j0_realized.mean:.6g}"
            f" +- {self.j0_realized.stderr if self.j0_realized.stderr is not None else float('nan'):.3g}",
            f"leader cost limit      = {self.j0_limit:.6g}"
            f"   (relative gap {rel(self.j0_realized.mean, self.j0_limit):.3%})",
            f"social cost/N realized = {self.jsoc_per_n_realized.mean:.6g}"
            f" +- {self.jsoc_per_n_realized.stderr if self.jsoc_per_n_realized.stderr is not None else float('nan'):.3g}",
            f"social cost/N limit    = {self.jsoc_per_n_limit:.6g}"
            f"   (relative gap {rel(self.jsoc_per_n_realized.mean, self.jsoc_per_n_limit):.3%})",
        ]
        for key, val in self.notes.items():
            out.append(f"{key} = {val}")
        return out

    def to_json(self) -> dict:
        d = asdict(self)
        d["j0_realized"] = [self.j0_realized.mean, self.j0_realized.stderr]
        d["jsoc_per_n_realized"] = [
            self.jsoc_per_n_realized.mean, self.jsoc_per_n_realized.stderr
        ]
        return d


def write_report(reports: list[CostReport], file_path):
    with open(file_path, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write("\n".join(rep.lines()) + "\n\n")


def write_manifest(manifest: dict, file_path):
    with open(file_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, MeanStderr):
        return [obj.mean, obj.stderr]
    return str(obj)
