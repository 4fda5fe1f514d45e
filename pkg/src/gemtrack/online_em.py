"""Online EM for a finite-state HMM observed through a changing sensor subset.

The recursion keeps exponentially weighted sufficient statistics conditioned
on the current state and re-estimates the transition matrix and the per-sensor
Gaussian parameters after every observation.

Observation statistics are kept per sensor rather than for the stacked
reading, because the stacked dimension changes with the activation vector.
For sensor ``k``::

    rho0[k, i, j]        ~ E[ weighted count of {x_s = i}       | x_t = j ]
    rho1[k, i, :, j]     ~ E[ weighted sum of 1{x_s = i} y_k(s)  | x_t = j ]
    rho2[k, i, :, :, j]  ~ E[ weighted sum of 1{x_s = i} y_k y_k^T | x_t = j ]

where the sums run over the times sensor ``k`` was active. Every step pushes
the conditioning index through the retrospective kernel; a sensor's own step
size (driven by how often it has been active) is applied only when it
reports. The conditioning-state axis is stored last so the push is a matmul.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .chain import TransitionMatrix
from .errors import DegenerateFilter, DimensionMismatch, SingularCovariance
from .scheduler import GAMMA, StepSchedule, step_size
from .sensors import Observation, SensorLibrary, SubsetParams, safe_cholesky

LOG_2PI = float(np.log(2.0 * np.pi))
MASS_FLOOR = 1e-8
COV_EIG_FLOOR = 1e-6
_NO_RHO2 = np.zeros((1, 1, 1, 1, 1))


@dataclass
class EMState:
    """Sufficient statistics of the online EM recursion.

    ``rho0``/``rho1``/``rho2`` are ``None`` when the matching parameter is
    known and need not be learned.
    """

    phi: np.ndarray                  # (q,) approximate filter
    rho_a: np.ndarray                # (q, q, q) transition statistics, [i, j, k]
    rho0: np.ndarray | None = None   # (N, q, q)
    rho1: np.ndarray | None = None   # (N, q, n_max, q)
    rho2: np.ndarray | None = None   # (N, q, n_max, n_max, q)
    clock: np.ndarray | None = None  # (N,) activations seen per sensor

    def copy(self) -> "EMState":
        return EMState(*(None if a is None else a.copy() for a in
                         (self.phi, self.rho_a, self.rho0, self.rho1, self.rho2, self.clock)))


def gaussian_weight(sp: SubsetParams, i: int, y: Observation, normalized: bool = True,
                    log: bool = False) -> float:
    """Likelihood weight of state ``i`` for the stacked reading ``y``.

    Unnormalized mode is ``exp(-0.5 * Mahalanobis^2)``; normalized mode is
    the Gaussian density. An empty reading has weight 1.
    """
    ys = y.stacked
    if ys.size != sp.dim:
        raise DimensionMismatch(f"reading has {ys.size} coordinates, parameters have {sp.dim}")
    if ys.size == 0:
        return 0.0 if log else 1.0
    chol = safe_cholesky(sp.covs[i], SingularCovariance)
    z = np.linalg.solve(chol, ys - sp.means[i])
    logw = -0.5 * float(z @ z)
    if normalized:
        logw -= 0.5 * (ys.size * LOG_2PI) + float(np.log(np.diag(chol)).sum())
    return logw if log else float(np.exp(logw))


def log_weights(lib: SensorLibrary, y: Observation, normalized: bool = True) -> np.ndarray:
    """Log weights of every state for reading ``y``, shape (q,).

    Uses the library's cached per-sensor precisions; agrees with
    :func:`gaussian_weight` on the matching subset.
    """
    if y.empty:
        return np.zeros(lib.q)
    active = y.sensors
    diff = y.padded(lib.n_max)[:, None, :] - lib.means_pad[active]     # (A, q, n)
    prec, logdet = lib.precisions()
    quad = np.einsum("aqi,aqij,aqj->q", diff, prec[active], diff)
    out = -0.5 * quad
    if normalized:
        D = int(lib.dims[active].sum())
        out -= 0.5 * (logdet[active].sum(axis=0) + D * LOG_2PI)
    return out


def _normalize_log(logp: np.ndarray) -> np.ndarray:
    m = np.max(logp)
    if not np.isfinite(m):
        raise DegenerateFilter("no state has positive filtered mass")
    w = np.exp(logp - m)
    return w / w.sum()


def em_init(pi, y0: Observation, sp: SubsetParams, b0, n_max: int | None = None,
            normalized: bool = True, learn_means: bool = True, learn_covs: bool = True,
            log_g: np.ndarray | None = None) -> EMState:
    """Statistics after the first reading.

    The filter is ``pi`` reweighted by the likelihood of ``y0``; transition
    statistics start at zero; each active sensor's observation statistics
    start at ``delta_ij * y_k^d``.
    """
    pi = np.asarray(pi, dtype=float)
    q = pi.size
    b0 = np.asarray(b0, dtype=bool)
    N = b0.size
    if n_max is None:
        n_max = int(sp.dims.max()) if sp.dims.size else 1
    if log_g is None:
        log_g = np.array([gaussian_weight(sp, i, y0, normalized, log=True) for i in range(q)])
    with np.errstate(divide="ignore"):
        phi = _normalize_log(np.log(pi) + log_g)
    st = EMState(phi, np.zeros((q, q, q)))
    if learn_means or learn_covs:
        st.rho0 = np.zeros((N, q, q))
        st.rho1 = np.zeros((N, q, n_max, q))
        st.clock = np.zeros(N, dtype=np.int64)
        if learn_covs:
            st.rho2 = np.zeros((N, q, n_max, n_max, q))
        if not y0.empty:
            _inject(st, y0.sensors, y0.padded(n_max), np.ones(y0.sensors.size))
    return st


def _inject(st: EMState, active: np.ndarray, ypad: np.ndarray, g: np.ndarray,
            scale_old: bool = True) -> None:
    """Blend ``g * delta_ij * y^d`` into the statistics of ``active`` sensors."""
    q = st.phi.size
    ar = np.arange(q)
    keep = 1.0 - g
    r0 = st.rho0[active]
    if scale_old:
        r0 *= keep[:, None, None]
    r0[:, ar, ar] += g[:, None]
    st.rho0[active] = r0
    r1 = st.rho1[active]
    if scale_old:
        r1 *= keep[:, None, None, None]
    # r1[a, i, :, i] += g[a] * y[a]
    r1[:, ar, :, ar] += (g[:, None] * ypad)[None, :, :]
    st.rho1[active] = r1
    if st.rho2 is not None:
        r2 = st.rho2[active]
        if scale_old:
            r2 *= keep[:, None, None, None, None]
        outer = g[:, None, None] * ypad[:, :, None] * ypad[:, None, :]
        r2[:, ar, :, :, ar] += outer[None]
        st.rho2[active] = r2
    st.clock[active] += 1


def filter_update(st: EMState, A_hat: TransitionMatrix, sp: SubsetParams | None = None,
                  y: Observation | None = None, normalized: bool = True,
                  log_g: np.ndarray | None = None) -> np.ndarray:
    """Predict the filter through ``A_hat`` and reweight by the reading.

    Pass either ``(sp, y)`` or precomputed log weights ``log_g``.
    """
    if log_g is None:
        q = st.phi.size
        log_g = np.array([gaussian_weight(sp, i, y, normalized, log=True) for i in range(q)])
    pred = st.phi @ A_hat.p
    with np.errstate(divide="ignore"):
        return _normalize_log(np.log(pred) + log_g)


def retrospective(st: EMState, A_hat: TransitionMatrix) -> np.ndarray:
    """Backward kernel ``r[i, j] = P(x_{t-1} = i | x_t = j)`` under the filter.

    Columns sum to one; a column with zero mass becomes uniform.
    """
    joint = st.phi[:, None] * A_hat.p
    col = joint.sum(axis=0)
    if col.min() > 0:
        return joint / col
    q = col.size
    r = np.empty_like(joint)
    ok = col > 0
    r[:, ok] = joint[:, ok] / col[ok]
    r[:, ~ok] = 1.0 / q
    return r


def e_step(st: EMState, t: int, r: np.ndarray, y: Observation, b,
           gamma: StepSchedule = GAMMA, decay_inactive: bool = False,
           step: float | None = None) -> EMState:
    """Advance the sufficient statistics to time ``t`` (mutates ``st``).

    Transition statistics use the global step ``gamma(t + 1)`` (or ``step``
    if given). Sensor statistics are pushed through ``r`` every step; an
    active sensor then blends in its reading with ``gamma(clock_k + 1)``.
    With ``decay_inactive`` the silent sensors are also scaled by
    ``1 - gamma(clock_k + 1)``.
    """
    g = step_size(gamma, t + 1) if step is None else step
    q = r.shape[0]
    ar = np.arange(q)
    mixed = (st.rho_a.reshape(q * q, q) @ r).reshape(q, q, q)
    mixed *= 1.0 - g
    mixed[:, ar, ar] += g * r
    st.rho_a = mixed

    if st.rho0 is None:
        return st
    st.rho0 = st.rho0 @ r
    st.rho1 = st.rho1 @ r
    if st.rho2 is not None:
        st.rho2 = st.rho2 @ r
    if decay_inactive:
        silent = np.ones(st.clock.size, dtype=bool)
        silent[y.sensors] = False
        keep = 1.0 - np.array([step_size(gamma, c + 1) for c in st.clock[silent]])
        st.rho0[silent] *= keep[:, None, None]
        st.rho1[silent] *= keep[:, None, None, None]
        if st.rho2 is not None:
            st.rho2[silent] *= keep[:, None, None, None, None]
    if not y.empty:
        active = y.sensors
        n_max = st.rho1.shape[2]
        gk = np.array([step_size(gamma, c + 1) for c in st.clock[active]])
        _inject(st, active, y.padded(n_max), gk)
    return st


def m_step(st: EMState, A_prev: TransitionMatrix, sp: SubsetParams, b,
           known_means: bool, known_covs: bool, tpm_floor: float = 0.0
           ) -> tuple[TransitionMatrix, SubsetParams]:
    """Re-estimate the transition matrix and the active sensors' parameters.

    Returns the new matrix and a copy of ``sp`` holding the new per-state
    means and covariances. Rows of the matrix with mass below 1e-8 keep
    their previous values; a (sensor, state) pair with count below 1e-8 is
    left unchanged. Covariances are symmetrized and eigenvalue-floored at
    1e-6.
    """
    A_hat = tpm_from_stats(st, A_prev, tpm_floor)
    if (known_means and known_covs) or st.rho0 is None or sp.dim == 0:
        return A_hat, sp
    means, covs = sensor_estimates(st, sp.sensors)
    new_means = sp.means.copy()
    new_covs = sp.covs.copy()
    off = 0
    for a, n in enumerate(sp.dims):
        sl = slice(off, off + n)
        ok = ~np.isnan(means[a, :, 0])
        if not known_means:
            new_means[ok, sl] = means[a][ok, :n]
        if not known_covs and covs is not None:
            blk = new_covs[:, sl, sl]
            blk[ok] = covs[a][ok][:, :n, :n]
            new_covs[:, sl, sl] = blk
        off += n
    return A_hat, replace(sp, means=new_means, covs=new_covs)


def tpm_from_stats(st: EMState, A_prev: TransitionMatrix, floor: float = 0.0) -> TransitionMatrix:
    S = st.rho_a @ st.phi                      # (q, q)
    mass = S.sum(axis=1)
    if mass.min() >= MASS_FLOOR:
        p = S / mass[:, None]
    else:
        p = A_prev.p.copy()
        ok = mass >= MASS_FLOOR
        p[ok] = S[ok] / mass[ok, None]
    if floor > 0:
        p = np.maximum(p, floor)
        p /= p.sum(axis=1, keepdims=True)
    p.setflags(write=False)
    return TransitionMatrix(p)


def sensor_estimates(st: EMState, sensors: np.ndarray):
    """Padded mean and covariance estimates for ``sensors``.

    Returns ``means`` of shape (A, q, n_max) and ``covs`` of shape
    (A, q, n_max, n_max) (``None`` when covariances are not tracked).
    Entries without enough evidence are NaN.
    """
    phi = st.phi
    S0 = st.rho0[sensors] @ phi                       # (A, q)
    S1 = st.rho1[sensors] @ phi                       # (A, q, n)
    ok = S0 >= MASS_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        means = np.where(ok[..., None], S1 / S0[..., None], np.nan)
    covs = None
    if st.rho2 is not None:
        S2 = st.rho2[sensors] @ phi                   # (A, q, n, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = S2 / S0[..., None, None] - means[..., :, None] * means[..., None, :]
        raw = np.where(ok[..., None, None], raw, 0.0)
        covs = psd_floor(raw)
        covs[~ok] = np.nan
    return means, covs


def psd_floor(cov: np.ndarray, floor: float = COV_EIG_FLOOR) -> np.ndarray:
    """Symmetrize and clip eigenvalues from below (works on stacks)."""
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, V = np.linalg.eigh(sym)
    w = np.maximum(w, floor)
    out = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def writeback(lib: SensorLibrary, b, updated: SubsetParams) -> SensorLibrary:
    """Copy the active sensors' blocks of ``updated`` into ``lib`` (in place)."""
    b = np.asarray(b, dtype=bool)
    active = np.flatnonzero(b)
    if not np.array_equal(active, updated.sensors):
        raise DimensionMismatch("updated parameters do not match the activation vector")
    if not np.array_equal(lib.dims[active], updated.dims):
        raise DimensionMismatch("updated parameter dimensions disagree with the library")
    cov_changed = False
    off = 0
    for k, n in zip(active, updated.dims):
        sl = slice(off, off + n)
        lib.means_pad[k, :, :n] = updated.means[:, sl]
        blk = updated.covs[:, sl, sl]
        if not np.array_equal(lib.covs_pad[k, :, :n, :n], blk):
            lib.covs_pad[k, :, :n, :n] = blk
            cov_changed = True
        off += n
    if cov_changed:
        lib.invalidate()
    return lib


class OnlineEM:
    """Stateful driver of the recursion against a parameter library.

    Parameters
    ----------
    A0 : TransitionMatrix
        Initial transition-matrix estimate.
    lib : SensorLibrary
        Parameter estimates; updated in place when means or covariances are
        learned.
    pi : array_like
        Initial state distribution.
    known_means, known_covs : bool
        Which observation parameters are fixed.
    m_step_start : int
        First time index at which the M-step runs; earlier steps only
        accumulate statistics.
    """

    def __init__(self, A0: TransitionMatrix, lib: SensorLibrary, pi, known_means: bool = True,
                 known_covs: bool = True, gamma: StepSchedule = GAMMA, normalized: bool = True,
                 decay_inactive: bool = False, m_step_start: int = 1, tpm_floor: float = 0.0):
        self.A_hat = A0
        self.lib = lib
        self.pi = np.asarray(pi, dtype=float)
        self.known_means = known_means
        self.known_covs = known_covs
        self.gamma = gamma
        self.normalized = normalized
        self.decay_inactive = decay_inactive
        self.m_step_start = m_step_start
        self.tpm_floor = tpm_floor
        self.state: EMState | None = None

    @property
    def learns_sensors(self) -> bool:
        return not (self.known_means and self.known_covs)

    def start(self, b0, y0: Observation) -> EMState:
        log_g = log_weights(self.lib, y0, self.normalized)
        self.state = em_init(self.pi, y0, _empty_sp(), b0, self.lib.n_max, self.normalized,
                             learn_means=not self.known_means, learn_covs=not self.known_covs,
                             log_g=log_g)
        return self.state

    def update(self, t: int, b, y: Observation) -> TransitionMatrix:
        """Process the reading at time ``t >= 1``; returns the new matrix estimate.

        Runs the same arithmetic as ``retrospective``, ``filter_update``,
        ``e_step`` and ``tpm_from_stats`` in fused compiled kernels.
        """
        st = self.state
        log_g = self._log_weights(y)
        g = step_size(self.gamma, t + 1)
        st.phi, r, A_new = _kernels.em_core(st.phi, self.A_hat.p, st.rho_a, log_g, g,
                                            MASS_FLOOR, self.tpm_floor)
        if np.isnan(st.phi[0]):
            raise DegenerateFilter("no state has positive filtered mass")
        if st.rho0 is not None:
            self._sensor_e_step(r, y)
        if t < self.m_step_start:
            return self.A_hat
        A_new.setflags(write=False)
        self.A_hat = TransitionMatrix(A_new)
        if self.learns_sensors and not y.empty:
            self._update_sensors(y.sensors)
        return self.A_hat

    def _log_weights(self, y: Observation) -> np.ndarray:
        lib = self.lib
        if y.empty:
            return np.zeros(lib.q)
        prec, logdet = lib.precisions()
        active = np.ascontiguousarray(y.sensors, dtype=np.int64)
        D = int(lib.dims[active].sum())
        return _kernels.log_weights(y.padded(lib.n_max), active, lib.means_pad, prec, logdet,
                                    D, self.normalized, LOG_2PI)

    def _sensor_e_step(self, r: np.ndarray, y: Observation) -> None:
        st = self.state
        expo = self.gamma.exponent
        active = np.ascontiguousarray(y.sensors, dtype=np.int64)
        if self.decay_inactive:
            keep = 1.0 - (st.clock + 1.0) ** -expo
            keep[active] = 1.0
        else:
            keep = np.ones(st.clock.size)
        gk = (st.clock[active] + 1.0) ** -expo
        ypad = y.padded(st.rho1.shape[2]) if active.size else np.zeros((0, st.rho1.shape[2]))
        track = st.rho2 is not None
        rho2 = st.rho2 if track else _NO_RHO2
        _kernels.sensor_stats_step(st.rho0, st.rho1, rho2, track, r, active, gk, ypad, keep)
        st.clock[active] += 1

    def _update_sensors(self, active: np.ndarray) -> None:
        lib = self.lib
        if self.known_covs:
            _kernels.update_means(self.state.rho0, self.state.rho1, self.state.phi,
                                  np.ascontiguousarray(active, dtype=np.int64),
                                  lib.dims, lib.means_pad, MASS_FLOOR)
            return
        means, covs = sensor_estimates(self.state, active)
        ok = ~np.isnan(means[..., 0])                 # (A, q)
        mask = lib.mask[active][:, None, :]           # (A, 1, n)
        if not self.known_means:
            cur = lib.means_pad[active]
            lib.means_pad[active] = np.where(ok[..., None] & mask, means, cur)
        if not self.known_covs and covs is not None:
            cur = lib.covs_pad[active]
            sel = ok[..., None, None] & mask[..., :, None] & mask[..., None, :]
            lib.covs_pad[active] = np.where(sel, covs, cur)
            lib.invalidate()


def _empty_sp() -> SubsetParams:
    return SubsetParams(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                        np.zeros((0, 0)), np.zeros((0, 0, 0)))
