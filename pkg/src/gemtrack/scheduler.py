"""Sensor-subset scheduling by single-site Gibbs sampling.

Each activation vector ``b`` carries a cost ``h(b) = f(b) + lam * |b|`` where
``f(b)`` is a running estimate of the tracking error under ``b``. The sampler
flips one coordinate per step from the two-point Boltzmann conditional at
inverse temperature ``beta``. ``f`` is learned on the fast step size
``alpha(n) = n**-0.7`` (indexed by visit count) and ``lam`` on the slow one
``gamma(t) = t**-0.8`` so that the average number of active sensors settles
at the budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidIndex

DEFAULT_BOUND = 100.0
DEFAULT_F = 1.0


@dataclass(frozen=True)
class StepSchedule:
    """``value(n) = n ** -exponent`` for ``n >= 1``."""

    exponent: float
    kind: str = "fast"

    def __post_init__(self):
        if not 0.5 < self.exponent <= 1.0:
            raise ValueError(f"exponent must lie in (0.5, 1], got {self.exponent}")

    def __call__(self, n: int) -> float:
        return step_size(self, n)


ALPHA = StepSchedule(0.7, "fast")
GAMMA = StepSchedule(0.8, "slow")


def step_size(s: StepSchedule, n: int) -> float:
    if n < 1:
        raise InvalidIndex(f"step sizes are indexed from 1, got {n}")
    return float(n) ** -s.exponent


def activation_key(b) -> bytes:
    """Hashable key of an activation vector."""
    return np.asarray(b, dtype=np.uint8).tobytes()


@dataclass
class CostTable:
    """Sparse table of per-subset error estimates.

    Only visited subsets are stored; every other subset reads as
    ``default_f``.
    """

    default_f: float = DEFAULT_F
    bound: float = DEFAULT_BOUND
    alpha: StepSchedule = ALPHA
    f: dict = field(default_factory=dict)
    visits: dict = field(default_factory=dict)

    def lookup(self, b) -> float:
        return self.f.get(activation_key(b), self.default_f)

    def __len__(self) -> int:
        return len(self.f)


@dataclass
class Multiplier:
    lam: float = 0.1
    bound: float = DEFAULT_BOUND

    def __post_init__(self):
        if self.bound <= 0:
            raise ValueError("bound must be positive")
        self.lam = min(max(self.lam, 0.0), self.bound)


def cost(table: CostTable, lam: float, b) -> float:
    b = np.asarray(b, dtype=bool)
    return table.lookup(b) + lam * int(b.sum())


def flip_probability(h1: float, h0: float, beta: float) -> float:
    """``exp(-beta h1) / (exp(-beta h1) + exp(-beta h0))`` without overflow."""
    z = beta * (h1 - h0)
    if z >= 0:
        e = math.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(z))


def gibbs_step(b_prev, table: CostTable, lam: float, beta: float,
               rng: np.random.Generator) -> np.ndarray:
    """Resample one uniformly chosen coordinate of ``b_prev``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    b = np.array(b_prev, dtype=bool)
    j = int(rng.integers(b.size))
    b[j] = True
    h1 = cost(table, lam, b)
    b[j] = False
    h0 = cost(table, lam, b)
    b[j] = rng.random() < flip_probability(h1, h0, beta)
    return b


def update_lambda(m: Multiplier, t: int, n_active: int, n_bar: float,
                  gamma: StepSchedule = GAMMA) -> Multiplier:
    """Projected multiplier step ``[lam + gamma(t+1) (|b| - N_bar)]`` on ``[0, bound]``."""
    lam = m.lam + step_size(gamma, t + 1) * (n_active - n_bar)
    return Multiplier(min(max(lam, 0.0), m.bound), m.bound)


def update_f(table: CostTable, b_used, trace_sigma: float) -> CostTable:
    """Move ``f(b_used)`` toward ``trace_sigma`` with step ``alpha(visits)``.

    Mutates and returns ``table``; entries other than ``b_used`` are left
    alone.
    """
    if trace_sigma < 0:
        raise ValueError("trace of a covariance cannot be negative")
    key = activation_key(b_used)
    nu = table.visits.get(key, 0) + 1
    table.visits[key] = nu
    if nu == 1:
        f = trace_sigma          # alpha(1) = 1; assign directly to avoid rounding
    else:
        f = table.f.get(key, table.default_f)
        f = f + step_size(table.alpha, nu) * (trace_sigma - f)
    table.f[key] = min(max(f, 0.0), table.bound)
    return table
