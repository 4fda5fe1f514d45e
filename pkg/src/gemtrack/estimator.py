"""Kalman-like belief tracker for a Markov chain observed through a varying
sensor subset.

The state is treated as a one-hot vector ``x`` with ``E[x_{t+1} | x_t] = P^T x_t``
and a linear-Gaussian reading ``y = M x + v``. Each step predicts through the
transition matrix, applies a linear gain built from the belief covariance
``diag(x) - x x^T`` and projects the corrected vector back onto the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .chain import TransitionMatrix
from .errors import SingularInnovation
from .sensors import Observation, SubsetParams

INNOVATION_RIDGE = 1e-9


@dataclass
class EstimatorState:
    belief: np.ndarray      # x_{t|t}
    predicted: np.ndarray   # x_{t|t-1}
    cov_est: np.ndarray     # Sigma_{t|t}
    cov_pred: np.ndarray    # Sigma_{t|t-1}

    @classmethod
    def initial(cls, pi) -> "EstimatorState":
        pi = np.asarray(pi, dtype=float)
        cov = belief_cov(pi)
        return cls(pi.copy(), pi.copy(), cov, cov.copy())


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, sum(w) = 1}`` (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / idx > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def belief_cov(x) -> np.ndarray:
    """``diag(x) - x x^T``."""
    x = np.asarray(x, dtype=float)
    cov = -x[:, None] * x[None, :]
    cov.flat[:: x.size + 1] += x
    return cov


def predict(P: TransitionMatrix, x_prev) -> np.ndarray:
    return np.asarray(x_prev, dtype=float) @ P.p


def estimate_step(prev: EstimatorState, P_hat: TransitionMatrix, sp: SubsetParams,
                  b, y: Observation) -> EstimatorState:
    """One predict/correct cycle.

    Parameters
    ----------
    prev : EstimatorState
        State after the previous step.
    P_hat : TransitionMatrix
        Transition matrix the tracker believes in.
    sp : SubsetParams
        Stacked parameters for the active sensors of ``b``.
    b : array_like of bool
        Activation vector used to collect ``y``.
    y : Observation

    Returns
    -------
    EstimatorState

    Notes
    -----
    With no active sensor the corrected belief equals the prediction.
    The gain is ``G = S M^T (M S M^T + Psi)^{-1}`` with ``S`` the predicted
    belief covariance and ``Psi`` the belief-weighted noise covariance.
    """
    x_pred = predict(P_hat, prev.belief)
    cov_pred = belief_cov(x_pred)
    if y.empty or sp.dim == 0:
        belief = x_pred
    else:
        belief = _kernels.kalman_correct(x_pred, np.ascontiguousarray(sp.means),
                                         np.ascontiguousarray(sp.covs), y.stacked,
                                         INNOVATION_RIDGE)
        if belief.size == 0:
            raise SingularInnovation("innovation matrix is singular")
    return EstimatorState(belief, x_pred, belief_cov(belief), cov_pred)
