"""Gaussian sensor models, observation generation and subset views.

Sensor ``k`` observing state ``i`` emits ``y_k ~ Normal(mu[k, i], Q[k, i])``
in ``R^{n_k}``. Parameters for all sensors live in one padded array so that
operations over an active subset vectorize: sensor ``k`` owns the leading
``n_k`` coordinates of its slot, the remaining coordinates hold a zero mean
and an identity covariance block that never reaches any caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CholeskyFailure, DimensionMismatch, SingularCovariance

COV_EPS = 0.1
DEFAULT_MEAN_SPREAD = 3.0
JITTER = 1e-10
JITTER_ATTEMPTS = 3


def safe_cholesky(cov: np.ndarray, exc=CholeskyFailure) -> np.ndarray:
    """Cholesky factor with up to three ``+1e-10 I`` jitter retries.

    Works on a single matrix or a stack of them.
    """
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(cov.shape[-1])
    for attempt in range(1, JITTER_ATTEMPTS + 1):
        try:
            return np.linalg.cholesky(cov + attempt * JITTER * eye)
        except np.linalg.LinAlgError:
            continue
    raise exc("covariance is not positive definite after jitter")


class SensorLibrary:
    """Per-sensor, per-state Gaussian parameters for ``N`` sensors.

    The same type stores the ground truth and the running estimates kept by
    online EM. Use :meth:`mean` / :meth:`cov` for unpadded views.

    Parameters
    ----------
    means : sequence of arrays, entry k has shape (q, n_k)
    covs : sequence of arrays, entry k has shape (q, n_k, n_k)
    """

    def __init__(self, means: Sequence[np.ndarray], covs: Sequence[np.ndarray]):
        if len(means) == 0 or len(means) != len(covs):
            raise DimensionMismatch("need one mean array and one covariance array per sensor")
        means = [np.atleast_2d(np.asarray(m, dtype=float)) for m in means]
        covs = [np.asarray(c, dtype=float) for c in covs]
        q = means[0].shape[0]
        dims = np.array([m.shape[1] for m in means], dtype=np.int64)
        for k, (m, c) in enumerate(zip(means, covs)):
            n = m.shape[1]
            if m.shape != (q, n) or c.shape != (q, n, n):
                raise DimensionMismatch(f"sensor {k}: means {m.shape}, covs {c.shape}, q={q}")
            if n < 1:
                raise DimensionMismatch(f"sensor {k} has zero observation dimension")
        n_max = int(dims.max())
        N = len(means)
        self.q = q
        self.dims = dims
        self.n_max = n_max
        self.uniform = bool(np.all(dims == n_max))
        self.means_pad = np.zeros((N, q, n_max))
        self.covs_pad = np.broadcast_to(np.eye(n_max), (N, q, n_max, n_max)).copy()
        # mask[k, d] is True for the real coordinates of sensor k
        self.mask = np.arange(n_max)[None, :] < dims[:, None]
        for k, (m, c) in enumerate(zip(means, covs)):
            n = m.shape[1]
            self.means_pad[k, :, :n] = m
            self.covs_pad[k, :, :n, :n] = c
        self._chol = None
        self._prec = None

    @property
    def N(self) -> int:
        return self.means_pad.shape[0]

    def mean(self, k: int, i: int) -> np.ndarray:
        return self.means_pad[k, i, : self.dims[k]]

    def cov(self, k: int, i: int) -> np.ndarray:
        n = self.dims[k]
        return self.covs_pad[k, i, :n, :n]

    def copy(self) -> "SensorLibrary":
        new = SensorLibrary.__new__(SensorLibrary)
        new.__dict__.update(self.__dict__)
        new.means_pad = self.means_pad.copy()
        new.covs_pad = self.covs_pad.copy()
        new._chol = None if self._chol is None else self._chol.copy()
        new._prec = None if self._prec is None else tuple(a.copy() for a in self._prec)
        return new

    def equals(self, other: "SensorLibrary") -> bool:
        return (np.array_equal(self.dims, other.dims)
                and np.array_equal(self.means_pad, other.means_pad)
                and np.array_equal(self.covs_pad, other.covs_pad))

    # cached factorizations; writeback invalidates them

    def cholesky(self) -> np.ndarray:
        """Padded Cholesky factors, shape (N, q, n_max, n_max)."""
        if self._chol is None:
            self._chol = safe_cholesky(self.covs_pad)
        return self._chol

    def precisions(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded inverse covariances and per-(sensor, state) log-determinants."""
        if self._prec is None:
            chol = safe_cholesky(self.covs_pad, SingularCovariance)
            inv_chol = np.linalg.inv(chol)
            prec = np.swapaxes(inv_chol, -1, -2) @ inv_chol
            logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
            self._prec = (prec, logdet)
        return self._prec

    def invalidate(self) -> None:
        self._chol = None
        self._prec = None

    def to_dict(self) -> dict:
        return {
            "means": [self.means_pad[k, :, :n].tolist() for k, n in enumerate(self.dims)],
            "covs": [self.covs_pad[k, :, :n, :n].tolist() for k, n in enumerate(self.dims)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SensorLibrary":
        return cls([np.array(m) for m in data["means"]], [np.array(c) for c in data["covs"]])


def random_sensor_params(N: int, q: int, dims, rng: np.random.Generator,
                         mean_spread: float = DEFAULT_MEAN_SPREAD,
                         noise_scale: float = 1.0) -> SensorLibrary:
    """Random library: ``mean_spread * Normal(0, I)`` means and
    ``L L^T + 0.1 I`` covariances with ``L`` drawn entrywise from
    ``Normal(0, noise_scale**2)``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    dims = _expand_dims(dims, N)
    means, covs = [], []
    for n in dims:
        means.append(mean_spread * rng.standard_normal((q, n)))
        L = noise_scale * rng.standard_normal((q, n, n))
        covs.append(L @ np.swapaxes(L, -1, -2) + COV_EPS * np.eye(n))
    return SensorLibrary(means, covs)


def _expand_dims(dims, N: int) -> list[int]:
    if np.isscalar(dims):
        dims = [int(dims)] * N
    dims = [int(n) for n in dims]
    if len(dims) != N:
        raise DimensionMismatch(f"{len(dims)} dimensions given for {N} sensors")
    if any(n < 1 for n in dims):
        raise ValueError("every observation dimension must be at least 1")
    return dims


def as_activation(b) -> np.ndarray:
    return np.asarray(b, dtype=bool)


@dataclass
class Observation:
    """Readings from the active sensors.

    ``sensors`` lists active sensor indices in increasing order and
    ``blocks[a]`` is the reading of ``sensors[a]``.
    """

    sensors: np.ndarray
    blocks: list = field(default_factory=list)
    pad: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def stacked(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate(self.blocks)

    @property
    def empty(self) -> bool:
        return len(self.blocks) == 0

    def padded(self, n_max: int) -> np.ndarray:
        if self.pad is not None and self.pad.shape[1] == n_max:
            return self.pad
        out = np.zeros((len(self.blocks), n_max))
        for a, y in enumerate(self.blocks):
            out[a, : y.shape[0]] = y
        return out

    @classmethod
    def from_padded(cls, sensors: np.ndarray, pad: np.ndarray, dims: np.ndarray) -> "Observation":
        return cls(sensors, [pad[a, : dims[k]] for a, k in enumerate(sensors)], pad)


def observe(lib: SensorLibrary, b, s: int, rng: np.random.Generator) -> Observation:
    """Draw readings of the active sensors of ``b`` when the chain is in ``s``."""
    b = as_activation(b)
    if b.shape != (lib.N,):
        raise DimensionMismatch(f"activation has length {b.shape}, library has {lib.N} sensors")
    active = np.flatnonzero(b)
    if active.size == 0:
        return Observation(active, [])
    z = rng.standard_normal((active.size, lib.n_max))
    return observe_with_noise(lib, active, s, z)


def observe_with_noise(lib: SensorLibrary, active: np.ndarray, s: int, z: np.ndarray) -> Observation:
    """Readings for ``active`` sensors given standard normal draws ``z``.

    ``z`` has one padded row per active sensor. The harness draws noise for
    every sensor each step and passes the active rows, so all variants of a
    seeded run see the same noise.
    """
    chol = lib.cholesky()[active, s]
    pad = lib.means_pad[active, s] + np.einsum("aij,aj->ai", chol, z)
    if not lib.uniform:
        pad *= lib.mask[active]          # padding coordinates must stay zero
    return Observation.from_padded(active, pad, lib.dims)


@dataclass
class SubsetParams:
    """Stacked parameters of the active sensors of one activation vector.

    means : (q, D) where row i is the stacked mean given state i
    covs : (q, D, D) block-diagonal covariances given each state
    """

    sensors: np.ndarray
    dims: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    @property
    def mean_matrix(self) -> np.ndarray:
        """Columns are the per-state stacked means, shape (D, q)."""
        return self.means.T

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)])


def subset_params(lib: SensorLibrary, b) -> SubsetParams:
    b = as_activation(b)
    if b.shape != (lib.N,):
        raise DimensionMismatch(f"activation has length {b.shape}, library has {lib.N} sensors")
    active = np.flatnonzero(b)
    dims = lib.dims[active]
    D = int(dims.sum())
    q = lib.q
    if lib.uniform:
        n = lib.n_max
        means = lib.means_pad[active].transpose(1, 0, 2).reshape(q, D)
        covs = np.zeros((q, D, D))
        for a in range(active.size):
            covs[:, a * n:(a + 1) * n, a * n:(a + 1) * n] = lib.covs_pad[active[a]]
        return SubsetParams(active, dims, means, covs)
    means = np.zeros((q, D))
    covs = np.zeros((q, D, D))
    off = 0
    for k, n in zip(active, dims):
        means[:, off:off + n] = lib.means_pad[k, :, :n]
        covs[:, off:off + n, off:off + n] = lib.covs_pad[k, :, :n, :n]
        off += n
    return SubsetParams(active, dims, means, covs)


def stack_moment(y: Observation, d: int):
    """``y^0 = 1``, ``y^1`` = stacked readings, ``y^2`` = block-diagonal of
    per-sensor outer products (cross-sensor blocks are zero)."""
    if d == 0:
        return 1.0
    if d == 1:
        return y.stacked
    if d == 2:
        D = sum(blk.shape[0] for blk in y.blocks)
        out = np.zeros((D, D))
        off = 0
        for blk in y.blocks:
            n = blk.shape[0]
            out[off:off + n, off:off + n] = np.outer(blk, blk)
            off += n
        return out
    raise ValueError(f"moment order must be 0, 1 or 2, got {d}")
