"""Finite-state Markov chain: transition matrices and trajectory simulation.

Convention used everywhere in this package: ``p[i, j]`` is the probability
of moving from state ``i`` to state ``j`` (rows sum to one). States are plain
integer indices ``0 .. q-1``; one-hot vectors only appear where a belief is
compared against the truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMatrix, NoConvergence, NonStochastic

ROW_TOL = 1e-9
POWER_ITER_CAP = 1_000_000


@dataclass(frozen=True)
class TransitionMatrix:
    """Validated row-stochastic matrix.

    Build instances through :func:`new_transition_matrix` or
    :func:`random_transition_matrix`; the constructor itself does not check.
    """

    p: np.ndarray

    @property
    def q(self) -> int:
        return self.p.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.p if dtype is None else self.p.astype(dtype)


def new_transition_matrix(rows, normalize: bool = False) -> TransitionMatrix:
    """Validate ``rows`` as a transition matrix.

    Parameters
    ----------
    rows : array_like, shape (q, q)
    normalize : bool
        Divide every row by its sum before checking. Negative entries are
        still rejected.

    Raises
    ------
    EmptyMatrix
        If ``q == 0``.
    NonStochastic
        If the matrix is not square, has a negative entry, or a row sum is
        off by more than 1e-9.
    """
    p = np.array(rows, dtype=float)
    if p.size == 0:
        raise EmptyMatrix("transition matrix has no states")
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise NonStochastic(f"transition matrix must be square, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise NonStochastic("transition matrix has non-finite entries")
    if np.any(p < 0):
        raise NonStochastic("transition matrix has negative entries")
    if normalize:
        sums = p.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise NonStochastic("cannot normalize a zero row")
        p = p / sums
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        raise NonStochastic(f"row {bad[0]} sums to {sums[bad[0]]!r}")
    p.setflags(write=False)
    return TransitionMatrix(p)


def random_transition_matrix(q: int, rng: np.random.Generator) -> TransitionMatrix:
    """Uniform(0, 1) entries, each row divided by its sum."""
    if q < 1:
        raise EmptyMatrix("q must be at least 1")
    raw = rng.uniform(0.0, 1.0, size=(q, q))
    p = raw / raw.sum(axis=1, keepdims=True)
    p.setflags(write=False)
    return TransitionMatrix(p)


def step_chain(P: TransitionMatrix, s: int, rng: np.random.Generator) -> int:
    """Draw the successor of state ``s``."""
    row = P.p[s]
    # inverse-CDF draw; clamp guards the last bin against rounding in cumsum
    nxt = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    return min(nxt, P.q - 1)


class ChainSampler:
    """Cached-CDF sampler for long trajectories from a fixed matrix.

    Produces exactly the same draws as repeated :func:`step_chain` calls on
    the same generator.
    """

    def __init__(self, P: TransitionMatrix):
        self.P = P
        self._cdf = np.cumsum(P.p, axis=1)

    def step(self, s: int, rng: np.random.Generator) -> int:
        nxt = int(np.searchsorted(self._cdf[s], rng.random(), side="right"))
        return min(nxt, self.P.q - 1)

    def trajectory(self, s0: int, length: int, rng: np.random.Generator) -> np.ndarray:
        states = np.empty(length, dtype=np.int64)
        s = s0
        for t in range(length):
            states[t] = s
            s = self.step(s, rng)
        return states


def stationary_distribution(P: TransitionMatrix, tol: float = 1e-10,
                            max_iter: int = POWER_ITER_CAP) -> np.ndarray:
    """Stationary distribution by power iteration.

    Iterates ``pi <- pi P`` from the uniform vector until the L1 residual
    ``||pi P - pi||_1`` drops below ``tol``.

    Raises
    ------
    NoConvergence
        When the residual is still above ``tol`` after ``max_iter`` steps,
        or when the residual stops changing (a reducible chain such as the
        identity keeps its starting vector forever, which is not accepted as
        an answer because it is not unique).
    """
    q = P.q
    if q == 1:
        return np.ones(1)
    p = P.p
    # a fixed point reached in one step from uniform is only trusted if the
    # chain is irreducible; reducible chains are rejected up front
    if not _irreducible(p):
        raise NoConvergence("chain is reducible; stationary distribution is not unique")
    pi = np.full(q, 1.0 / q)
    for _ in range(max_iter):
        nxt = pi @ p
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            if np.abs(nxt @ p - nxt).sum() < tol:
                return nxt
        pi = nxt
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations")


def _irreducible(p: np.ndarray) -> bool:
    q = p.shape[0]
    adj = p > 0
    reach = np.eye(q, dtype=bool) | adj
    # transitive closure by repeated squaring
    for _ in range(int(np.ceil(np.log2(max(q, 2)))) + 1):
        reach = reach | ((reach.astype(np.int64) @ reach.astype(np.int64)) > 0)
    return bool(reach.all())
