"""Fixed-step explicit Runge-Kutta integration over array-valued states."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from . import fixedpoint as fx


class Tableau(NamedTuple):
    a: tuple  # strictly lower-triangular stage coefficients, row s has s entries
    b: tuple
    c: tuple
    order: int


TABLEAUS = {
    "euler": Tableau(a=((),), b=(1.0,), c=(0.0,), order=1),
    # explicit midpoint
    "rk2": Tableau(a=((), (0.5,)), b=(0.0, 1.0), c=(0.0, 0.5), order=2),
    "rk4": Tableau(
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
        c=(0.0, 0.5, 0.5, 1.0),
        order=4,
    ),
}


class SolverError(ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    t0: float = 0.0
    t1: float = 1.0
    steps: int = 1

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ValueError(f"unknown solver method {self.method!r}; choose from {sorted(TABLEAUS)}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def tableau(self) -> Tableau:
        return TABLEAUS[self.method]

    def reversed(self) -> "SolverConfig":
        return replace(self, t0=self.t1, t1=self.t0)


class FloatArithmetic:
    @staticmethod
    def axpy(y, a, x):
        return y + a * x

    @staticmethod
    def check(z, step):
        if not np.all(np.isfinite(z)):
            raise SolverError(f"non-finite state after step {step}", step=step)


class Q20Arithmetic:
    """State update in Q20: coefficients are quantised, sums saturate."""

    def __init__(self, counter: fx.SaturationCounter | None = None):
        self.counter = counter

    def axpy(self, y, a, x):
        return fx.add_array(y, fx.mul_array(fx.raw_from_float(a), x, self.counter), self.counter)

    @staticmethod
    def check(z, step):
        pass


FLOAT = FloatArithmetic()


def ode_solve(z0, cfg: SolverConfig, f: Callable, arithmetic=None):
    """Integrate ``dz/dt = f(z, t)`` from ``cfg.t0`` to ``cfg.t1`` in ``cfg.steps`` steps.

    Each step evaluates the stages of the configured tableau at
    ``t_i + c_s * h`` with ``t_i = t0 + i * h``; Euler is
    ``z_{i+1} = z_i + h * f(z_i, t_i)``.  Integration runs backwards when
    ``t1 < t0``.
    """
    ar = FLOAT if arithmetic is None else arithmetic
    tab = cfg.tableau
    h = cfg.h
    z = z0
    for i in range(cfg.steps):
        t = cfg.t0 + i * h
        ks = []
        for s, row in enumerate(tab.a):
            zs = z
            for j, a in enumerate(row):
                if a:
                    zs = ar.axpy(zs, h * a, ks[j])
            ks.append(f(zs, t + tab.c[s] * h))
        for s, b in enumerate(tab.b):
            if b:
                z = ar.axpy(z, h * b, ks[s])
        ar.check(z, i)
    return z
