"""Scenario configuration, the simulation loop, metrics and file outputs.

Variants
--------
GEM-K   Gibbs scheduling, known sensor parameters, transition matrix learned.
GEM-UK  Gibbs scheduling, known covariances, means and transition matrix learned.
GEM-FO  every sensor active, transition matrix learned.
GEM-U   each sensor active independently with probability N_bar / N,
        transition matrix learned.
GEM-FI  Gibbs scheduling with the true transition matrix, nothing learned.
GEN     genie: the estimate is the row of the true matrix at the previous
        true state; no sensors.

All randomness is drawn from numpy's PCG64 generator seeded through
``SeedSequence(seed).spawn``. Ground truth, the chain trajectory and the
observation noise come from dedicated streams, so every variant run with the
same seed sees the same world.
"""

from __future__ import annotations

import dataclasses
import glob as globmod
import itertools
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chain import ChainSampler, TransitionMatrix, new_transition_matrix, random_transition_matrix
from .errors import GemError, ParseError, ValidationError
from .estimator import EstimatorState, estimate_step
from .online_em import OnlineEM
from .scheduler import CostTable, Multiplier, StepSchedule, gibbs_step, update_f, update_lambda
from .sensors import SensorLibrary, observe_with_noise, random_sensor_params, subset_params

log = logging.getLogger(__name__)

VARIANTS = ("GEM-K", "GEM-UK", "GEM-FO", "GEM-U", "GEM-FI", "GEN")
GIBBS_VARIANTS = {"GEM-K", "GEM-UK", "GEM-FI"}
# expected ordering of final MSE, best first
MSE_ORDER = ("GEN", "GEM-FO", "GEM-K", "GEM-U", "GEM-UK")
CSV_HEADER = "t,mse_inst,mse_avg,active_avg,lambda,tpm_frob"
SUBSET_CACHE_SIZE = 2048

# stream slots of SeedSequence(seed).spawn(...)
_TRUTH_TPM, _TRUTH_SENSORS, _CHAIN, _NOISE, _GIBBS, _UNIFORM, _EST_TPM, _EST_MEANS = range(8)


@dataclass
class ScenarioConfig:
    variant: str = "GEM-K"
    N: int = 20
    q: int = 10
    N_bar: float = 5.0
    beta: float = 10.0
    horizon: int = 10_000
    alpha_exponent: float = 0.7
    gamma_exponent: float = 0.8
    lambda0: float = 0.1
    bound: float = 100.0
    # cost of an unvisited subset; must sit below the error of typical visited
    # subsets or the sampler stops exploring (see README)
    default_f: float = 0.5
    dims: int | list = 2
    mean_spread: float = 3.0
    noise_scale: float = 1.0
    pi: list | None = None
    seed: int = 0
    reps: int = 1
    normalized_weight: bool = True
    decay_inactive: bool = False
    m_step_start: int = 1
    tpm_floor: float = 1e-6
    out_dir: str = "runs"
    stride: int = 1

    def replace(self, **changes) -> "ScenarioConfig":
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sensor_dims(self) -> list[int]:
        if isinstance(self.dims, (list, tuple)):
            return [int(n) for n in self.dims]
        return [int(self.dims)] * self.N

    def initial_distribution(self) -> np.ndarray:
        if self.pi is None:
            return np.full(self.q, 1.0 / self.q)
        return np.asarray(self.pi, dtype=float)


FIELD_NAMES = {f.name for f in dataclasses.fields(ScenarioConfig)}


def validate(cfg: ScenarioConfig) -> None:
    if cfg.variant not in VARIANTS:
        raise ValidationError(f"unknown variant {cfg.variant!r}; expected one of {VARIANTS}")
    if cfg.N < 1 or cfg.q < 1:
        raise ValidationError("N and q must be positive")
    if not 0 <= cfg.N_bar <= cfg.N:
        raise ValidationError(f"activation budget N_bar={cfg.N_bar} is outside [0, N={cfg.N}]")
    if cfg.horizon < 1:
        raise ValidationError("horizon must be at least 1")
    if cfg.beta <= 0:
        raise ValidationError("beta must be positive")
    if cfg.bound <= 0:
        raise ValidationError("bound must be positive")
    if cfg.reps < 1 or cfg.stride < 1:
        raise ValidationError("reps and stride must be at least 1")
    for name in ("alpha_exponent", "gamma_exponent"):
        v = getattr(cfg, name)
        if not 0.5 < v <= 1.0:
            raise ValidationError(f"{name}={v} must lie in (0.5, 1]")
    if len(cfg.sensor_dims()) != cfg.N or min(cfg.sensor_dims()) < 1:
        raise ValidationError("dims must be a positive integer or one per sensor")
    if cfg.pi is not None:
        pi = np.asarray(cfg.pi, dtype=float)
        if pi.shape != (cfg.q,) or np.any(pi < 0) or abs(pi.sum() - 1) > 1e-9:
            raise ValidationError("pi must be a probability vector of length q")


def parse_config(source=None, **overrides) -> ScenarioConfig:
    """Resolve a scenario from a JSON file, a dict, or nothing (defaults).

    Keyword overrides win over the file. Unknown fields raise
    :class:`ParseError`, infeasible values :class:`ValidationError`.
    """
    data: dict = {}
    if source is not None:
        if isinstance(source, dict):
            data = dict(source)
        else:
            try:
                text = Path(source).read_text()
            except OSError as exc:
                raise ParseError(f"cannot read config {source}: {exc}") from exc
            try:
                data = json.loads(text) if text.strip() else {}
            except json.JSONDecodeError as exc:
                raise ParseError(f"config {source} is not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise ParseError("config root must be a JSON object")
    # a summary file embeds its config under "config"
    if "config" in data and isinstance(data["config"], dict):
        data = dict(data["config"])
    data.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(data) - FIELD_NAMES
    if unknown:
        raise ParseError(f"unknown config fields: {sorted(unknown)}")
    if data.get("variant") == "GEN":
        defaults = ScenarioConfig()
        ignored = sorted(k for k in ("beta", "lambda0")
                         if k in data and data[k] != getattr(defaults, k))
        if ignored:
            warnings.warn(f"variant GEN uses no scheduler; ignoring {ignored}", UserWarning,
                          stacklevel=2)
    try:
        cfg = ScenarioConfig(**data)
    except TypeError as exc:
        raise ParseError(str(exc)) from exc
    validate(cfg)
    return cfg


@dataclass
class RunTimeSeries:
    t: np.ndarray
    mse_inst: np.ndarray
    mse_avg: np.ndarray
    active_avg: np.ndarray
    lam: np.ndarray | None = None        # lambda(t+1) after the step-t update
    tpm_frob: np.ndarray | None = None   # ||A - A_hat_t||_F after the step-t update

    def __len__(self) -> int:
        return self.t.size

    def tpm_frob_avg(self) -> np.ndarray | None:
        """Running average of the matrix error, ``(1/t) sum ||A - A_hat||_F``."""
        if self.tpm_frob is None:
            return None
        return np.cumsum(self.tpm_frob) / np.arange(1, self.tpm_frob.size + 1)

    def tail_mse(self, fraction: float = 0.1) -> float:
        n = max(1, int(round(fraction * self.mse_inst.size)))
        return float(self.mse_inst[-n:].mean())


@dataclass
class RunSummary:
    variant: str
    seed: int
    final_mse: float
    mse_db: float
    tail_mse: float
    final_active: float
    final_tpm_frob: float | None
    wall_time: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def to_db(mse: float) -> float:
    return 10.0 * math.log10(mse)


def make_ground_truth(cfg: ScenarioConfig) -> tuple[TransitionMatrix, SensorLibrary]:
    """True transition matrix and sensor library; depends on the seed only."""
    streams = _streams(cfg.seed)
    A = random_transition_matrix(cfg.q, streams[_TRUTH_TPM])
    lib = random_sensor_params(cfg.N, cfg.q, cfg.sensor_dims(), streams[_TRUTH_SENSORS],
                               cfg.mean_spread, cfg.noise_scale)
    return A, lib


def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(8)]


def run_scenario(cfg: ScenarioConfig, truth: tuple[TransitionMatrix, SensorLibrary] | None = None,
                 record=None) -> tuple[RunTimeSeries, RunSummary]:
    """Simulate one seeded run of ``cfg.variant`` for ``cfg.horizon`` steps.

    ``truth`` overrides the seeded ground truth. ``record``, if given, is
    called as ``record(t, context)`` after every step with a dict holding the
    live objects (belief, EM state, library, multiplier, cost table); tests
    use it to check invariants along the trajectory.
    """
    validate(cfg)
    started = time.perf_counter()
    streams = _streams(cfg.seed)
    A, true_lib = truth if truth is not None else make_ground_truth(cfg)
    if A.q != cfg.q or true_lib.N != cfg.N:
        raise ValidationError("ground truth does not match the configured N and q")
    variant = cfg.variant
    N, q, T = cfg.N, cfg.q, cfg.horizon
    pi = cfg.initial_distribution()
    alpha = StepSchedule(cfg.alpha_exponent, "fast")
    gamma = StepSchedule(cfg.gamma_exponent, "slow")
    gibbs = variant in GIBBS_VARIANTS
    learns_tpm = variant in {"GEM-K", "GEM-UK", "GEM-FO", "GEM-U"}

    rng_chain, rng_noise = streams[_CHAIN], streams[_NOISE]
    rng_gibbs, rng_uniform = streams[_GIBBS], streams[_UNIFORM]
    sampler = ChainSampler(A)
    n_max = true_lib.n_max

    est_lib = true_lib
    if variant == "GEM-UK":
        est_lib = true_lib.copy()
        guess = random_sensor_params(N, q, cfg.sensor_dims(), streams[_EST_MEANS],
                                     cfg.mean_spread, cfg.noise_scale)
        est_lib.means_pad[...] = guess.means_pad
    em = None
    if learns_tpm:
        A0 = random_transition_matrix(q, streams[_EST_TPM])
        em = OnlineEM(A0, est_lib, pi, known_means=variant != "GEM-UK", known_covs=True,
                      gamma=gamma, normalized=cfg.normalized_weight,
                      decay_inactive=cfg.decay_inactive, m_step_start=cfg.m_step_start,
                      tpm_floor=cfg.tpm_floor)

    table = CostTable(cfg.default_f, cfg.bound, alpha)
    if gibbs:
        log.info("%s seed=%d default_f=%g", variant, cfg.seed, cfg.default_f)
    mult = Multiplier(cfg.lambda0, cfg.bound)
    if gibbs:
        b = np.zeros(N, dtype=bool)
        b[rng_gibbs.choice(N, size=int(round(cfg.N_bar)), replace=False)] = True
    elif variant == "GEM-FO":
        b = np.ones(N, dtype=bool)
    else:
        b = np.zeros(N, dtype=bool)
    identity = new_transition_matrix(np.eye(q))
    # subset views of a library that never changes can be reused
    sp_cache: dict | None = {} if variant != "GEM-UK" else None
    est = EstimatorState.initial(pi)

    mse = np.empty(T)
    active = np.empty(T)
    lam_hist = np.empty(T) if gibbs else None
    frob = np.empty(T) if learns_tpm else None

    x = int(np.searchsorted(np.cumsum(pi), rng_chain.random(), side="right"))
    x = min(x, q - 1)
    x_prev = x
    for t in range(T):
        if t > 0:
            x_prev = x
            x = sampler.step(x, rng_chain)
        noise = rng_noise.standard_normal((N, n_max))

        if variant == "GEN":
            xhat = pi if t == 0 else A.p[x_prev]
            active[t] = 0.0
        else:
            if gibbs:
                b = gibbs_step(b, table, mult.lam, cfg.beta, rng_gibbs)
                mult = update_lambda(mult, t, int(b.sum()), cfg.N_bar, gamma)
                lam_hist[t] = mult.lam
            elif variant == "GEM-U":
                b = rng_uniform.random(N) < cfg.N_bar / N
            on = np.flatnonzero(b)
            y = observe_with_noise(true_lib, on, x, noise[on])
            A_used = A if variant == "GEM-FI" else em.A_hat
            if sp_cache is None:
                sp = subset_params(est_lib, b)
            else:
                key = b.tobytes()
                sp = sp_cache.get(key)
                if sp is None:
                    if len(sp_cache) >= SUBSET_CACHE_SIZE:
                        sp_cache.clear()
                    sp = sp_cache[key] = subset_params(est_lib, b)
            est = estimate_step(est, identity if t == 0 else A_used, sp, b, y)
            xhat = est.belief
            if gibbs:
                update_f(table, b, max(float(np.trace(est.cov_est)), 0.0))
            if em is not None:
                if t == 0:
                    em.start(b, y)
                else:
                    em.update(t, b, y)
                frob[t] = float(np.linalg.norm(A.p - em.A_hat.p))
            active[t] = on.size

        err = float(xhat @ xhat) - 2.0 * float(xhat[x]) + 1.0
        mse[t] = max(err, 0.0)
        if record is not None:
            record(t, {"x": x, "xhat": xhat, "b": b, "est": est, "em": em, "lib": est_lib,
                       "mult": mult, "table": table})

    steps = np.arange(1, T + 1)
    ts = RunTimeSeries(t=np.arange(T), mse_inst=mse, mse_avg=np.cumsum(mse) / steps,
                       active_avg=np.cumsum(active) / steps, lam=lam_hist, tpm_frob=frob)
    final = float(ts.mse_avg[-1])
    summary = RunSummary(
        variant=variant, seed=cfg.seed, final_mse=final,
        mse_db=to_db(final) if final > 0 else float("-inf"),
        tail_mse=ts.tail_mse(), final_active=float(ts.active_avg[-1]),
        final_tpm_frob=None if frob is None else float(frob[-1]),
        wall_time=time.perf_counter() - started, config=cfg.to_dict())
    log.info("%s seed=%d mse=%.4g (%.2f dB) active=%.2f in %.1fs", variant, cfg.seed, final,
             summary.mse_db, summary.final_active, summary.wall_time)
    return ts, summary


def _run_one(cfg: ScenarioConfig):
    try:
        return run_scenario(cfg)
    except GemError as exc:
        log.error("run %s seed=%d aborted: %s", cfg.variant, cfg.seed, exc)
        raise


def run_many(configs, workers: int | None = None):
    """Run independent scenarios, in worker processes when ``workers > 1``."""
    configs = list(configs)
    if workers is None:
        workers = min(len(configs), os.cpu_count() or 1)
    if workers <= 1:
        return [_run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, configs))


def replications(cfg: ScenarioConfig) -> list[ScenarioConfig]:
    """One config per replication; seeds are ``seed, seed + 1, ...``."""
    return [cfg.replace(seed=cfg.seed + r, reps=1) for r in range(cfg.reps)]


def compare(summaries) -> dict:
    """Tabulate MSE per run and check the expected ordering per seed."""
    summaries = list(summaries)
    if len(summaries) < 2:
        raise ValueError("need at least two summaries to compare")
    rows = [{"variant": s.variant, "seed": s.seed, "mse": s.final_mse, "mse_db": s.mse_db}
            for s in summaries]
    by_seed: dict[int, dict[str, RunSummary]] = {}
    for s in summaries:
        by_seed.setdefault(s.seed, {})[s.variant] = s
    seeds = []
    for seed in sorted(by_seed):
        runs = by_seed[seed]
        gaps = {f"{a} - {b}": runs[a].mse_db - runs[b].mse_db
                for a, b in itertools.combinations(sorted(runs), 2)}
        present = [v for v in MSE_ORDER if v in runs]
        ordered = all(runs[a].final_mse <= runs[b].final_mse
                      for a, b in zip(present, present[1:]))
        seeds.append({"seed": seed, "gaps_db": gaps, "ordering": present,
                      "ordering_holds": ordered if len(present) >= 2 else None})
    checked = [s["ordering_holds"] for s in seeds if s["ordering_holds"] is not None]
    return {
        "runs": rows,
        "seeds": seeds,
        "ordering": list(MSE_ORDER),
        "ordering_pass": sum(checked),
        "ordering_checked": len(checked),
    }


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_outputs(ts: RunTimeSeries, s: RunSummary, cfg: ScenarioConfig,
                  out_dir=None) -> tuple[Path, Path]:
    """Write ``<variant>_seed<seed>.csv`` and ``.json`` into the output directory."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{s.variant}_seed{s.seed}"
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    idx = np.arange(0, len(ts), cfg.stride)
    if idx[-1] != len(ts) - 1:
        idx = np.append(idx, len(ts) - 1)
    lines = [CSV_HEADER]
    for i in idx:
        lines.append(",".join((
            str(int(ts.t[i])), _fmt(ts.mse_inst[i]), _fmt(ts.mse_avg[i]), _fmt(ts.active_avg[i]),
            _fmt(None if ts.lam is None else ts.lam[i]),
            _fmt(None if ts.tpm_frob is None else ts.tpm_frob[i]))))
    csv_path.write_text("\n".join(lines) + "\n")
    json_path.write_text(json.dumps(s.to_dict(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def load_summary(path) -> RunSummary:
    data = json.loads(Path(path).read_text())
    return RunSummary(**data)


def load_summaries(pattern: str) -> list[RunSummary]:
    paths = sorted(globmod.glob(pattern))
    return [load_summary(p) for p in paths]
