"""Solvers and simulators for linear-quadratic mean-field Stackelberg games
with one leader and a population of cooperating followers.

Submodules:
    grid      time grids, matrix paths, RK4 and Euler-Maruyama steppers
    model     model data, derived weights, assumptions, config format
    openloop  open-loop equilibrium (Riccati cascade + augmented solve)
    feedback  feedback equilibrium (coupled eight-matrix Riccati system)
    simulate  population trajectory generation
    costs     realized costs, ensembles, performance-difference sweeps
    cli       command-line front end
"""

__version__ = "0.1.0"

__all__ = [
    "grid", "model", "openloop", "feedback", "simulate", "costs", "io", "cli",
]


def __getattr__(name):
    # submodules load on first use so the CLI can pin thread env vars first
    if name in __all__:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
