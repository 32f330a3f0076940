"""Monte-Carlo evaluation of caching policies under demand and network dynamics.

Each replication draws a network window, tags the SBS nearest to a typical
user at the window center, and evolves per-SBS request probabilities and
storage levels over [0, T]. Costs are accounted at the tagged SBS with the
empirical content overlap contributed by its neighbors; the average rate is
the precomputed mean-field value from the radio layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from concurrent.futures import ProcessPoolExecutor

from .demand import DemandState, OuParams, ou_step
from .errors import BarrierViolationError, ConfigError
from .policies import DecisionContext, IpiModel, make_policy, observe_popularity
from .radio import NetworkRealization, RadioEnvironment, sample_network, torus_distances


@dataclass(frozen=True)
class SimConfig:
    """Everything one replication needs."""

    env: RadioEnvironment
    rate: float                  # average rate per unit bandwidth (from radio)
    area: tuple = (200.0, 200.0)
    request_range: float = None  # R_c, defaults to the reception ball radius
    # demand of the tracked content
    mean_popularity: float = 0.3
    x0: float = 0.3
    reversion_rate: float = 1.0
    volatility: float = 0.1
    # cost constants
    storage_weight: float = 0.0      # gamma
    storage_capacity: float = 1.0    # C
    content_size: float = 1.0        # L
    discard_rate: float = 0.1        # e
    backhaul_limit: float = 1.0      # B
    neighbor_degeneracy: float = 20.0  # N_r
    x_min: float = 1e-3
    q0: float = 0.7
    # schedule
    horizon: float = 1.0
    dt: float = 0.01
    replications: int = 20
    master_seed: int = 0

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.dt <= 0 or self.horizon < 0:
            raise ConfigError("dt must be positive and horizon nonnegative")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ConfigError("dt must divide the horizon")
        if not 0.0 <= self.q0 <= self.storage_capacity:
            raise ConfigError("q0 must lie in [0, C]")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def rc(self) -> float:
        return self.env.ball_radius if self.request_range is None else self.request_range

    def decision_context(self) -> DecisionContext:
        return DecisionContext(
            backhaul_limit=self.backhaul_limit,
            content_size=self.content_size,
            storage_capacity=self.storage_capacity,
            rate=self.rate,
        )


@dataclass
class SbsState:
    """Position and remaining storage of one SBS (per tracked content)."""

    position: np.ndarray
    storage: float
    fraction_history: list = field(default_factory=list)


def next_storage(q, p, cfg: SimConfig):
    """Storage evolution Q' = clip(Q + (e - L p) dt, 0, C)."""
    drift = cfg.discard_rate - cfg.content_size * np.asarray(p, dtype=float)
    return np.clip(np.asarray(q, dtype=float) + drift * cfg.dt, 0.0, cfg.storage_capacity)


def step_storage(s: SbsState, p: float, cfg: SimConfig) -> SbsState:
    s.fraction_history.append(float(p))
    return SbsState(s.position, float(next_storage(s.storage, p, cfg)), s.fraction_history)


def instantaneous_cost(p, q, x, overlap: float, rate: float, cfg: SimConfig) -> float:
    """Global instantaneous cost: backhaul barrier scaled by overlap and the
    popularity-weighted rate, plus the storage occupation term."""
    lp = cfg.content_size * float(p)
    if lp >= cfg.backhaul_limit:
        raise BarrierViolationError(f"L*p = {lp} reached the backhaul limit {cfg.backhaul_limit}")
    phi = -math.log(cfg.backhaul_limit - lp)
    x_eff = max(float(x), cfg.x_min)
    backhaul = 0.0 if phi == 0.0 else phi * (1.0 + overlap) / (rate * x_eff)
    storage = cfg.storage_weight * (cfg.storage_capacity - float(q)) / cfg.storage_capacity
    return backhaul + storage


def empirical_overlap(
    realization: NetworkRealization,
    fractions: np.ndarray,
    user: np.ndarray,
    cfg: SimConfig,
    exclude: int = None,
) -> float:
    """Content overlap per unit storage at the user: sum of neighbor caching
    fractions inside R_c divided by C * N_r. Empty neighborhoods give zero."""
    dist = torus_distances(realization.sbs_positions, user, realization.area)
    mask = dist <= cfg.rc
    if exclude is not None:
        mask[exclude] = False
    if not mask.any():
        return 0.0
    return float(np.sum(fractions[mask]) / (cfg.storage_capacity * cfg.neighbor_degeneracy))


@dataclass
class CostLedger:
    """Per-replication record of the tagged SBS."""

    t: np.ndarray
    cost: np.ndarray
    overlap: np.ndarray
    usage: np.ndarray          # occupied fraction (C - Q)/C
    lra: np.ndarray            # running trapezoidal integral of cost
    barrier_hits: int
    seed: int

    @property
    def final_lra(self) -> float:
        return float(self.lra[-1])

    @property
    def mean_overlap(self) -> float:
        """Time-averaged overlap per unit storage (the Fig.9-style metric)."""
        if len(self.t) < 2:
            return float(self.overlap[0]) if len(self.t) else 0.0
        steps = np.diff(self.t)
        area = float(np.sum(0.5 * (self.overlap[1:] + self.overlap[:-1]) * steps))
        return area / float(self.t[-1] - self.t[0])


def _cumtrapz(y: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(y)
    if len(y) > 1:
        out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * dt)
    return out


def run_replication(cfg: SimConfig, policy, ipi: IpiModel, seed: int) -> CostLedger:
    """Simulate one network draw over [0, T] under the given policy."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        real = sample_network(cfg.env, cfg.area, rng)
        if len(real.sbs_positions) > 0:
            break
    else:
        raise ConfigError("window too small: no SBS drawn in 100 attempts")

    user = np.array([0.5 * cfg.area[0], 0.5 * cfg.area[1]])
    dist = torus_distances(real.sbs_positions, user, real.area)
    tagged = int(np.argmin(dist))

    n_sbs = len(real.sbs_positions)
    ou = OuParams(
        reversion_rate=cfg.reversion_rate,
        volatility=cfg.volatility,
        mean=cfg.mean_popularity,
        dt=cfg.dt,
    )
    demand = DemandState(x=np.full(n_sbs, cfg.x0), t=0.0)
    storage = np.full(n_sbs, cfg.q0)
    ctx = cfg.decision_context()

    n = cfg.n_steps
    t_grid = np.arange(n + 1) * cfg.dt
    cost = np.empty(n + 1)
    overlap = np.empty(n + 1)
    usage = np.empty(n + 1)
    barrier_hits = 0

    for k in range(n + 1):
        x_hat = observe_popularity(demand.x, ipi, rng)
        p = np.asarray(policy.decide(x_hat, storage, t_grid[k], ctx), dtype=float)
        iov = empirical_overlap(real, p, user, cfg, exclude=tagged)
        cost[k] = instantaneous_cost(
            p[tagged], storage[tagged], demand.x[tagged], iov, cfg.rate, cfg
        )
        overlap[k] = iov
        usage[k] = (cfg.storage_capacity - storage[tagged]) / cfg.storage_capacity
        if k < n:
            storage = next_storage(storage, p, cfg)
            demand = ou_step(demand, ou, rng)

    return CostLedger(
        t=t_grid,
        cost=cost,
        overlap=overlap,
        usage=usage,
        lra=_cumtrapz(cost, cfg.dt),
        barrier_hits=barrier_hits,
        seed=seed,
    )


def replication_seeds(master_seed: int, replications: int) -> list:
    """Deterministic per-replication integer seeds derived from the master."""
    state = np.random.SeedSequence(master_seed).generate_state(replications, dtype=np.uint64)
    return [int(s) for s in state]


@dataclass
class Summary:
    """Across-replication mean and 95% normal-approximation band."""

    t: np.ndarray
    lra_mean: np.ndarray
    lra_lo: np.ndarray
    lra_hi: np.ndarray
    overlap_mean: float
    overlap_lo: float
    overlap_hi: float
    n: int


def _experiment_task(task):
    cfg, kind, field, ipi, seed = task
    policy_seed = np.random.SeedSequence([seed, 1]) if kind == "random" else None
    policy = make_policy(kind, field=field, seed=policy_seed)
    return run_replication(cfg, policy, ipi, seed)


def run_experiment(cfg: SimConfig, kind: str, ipi: IpiModel, field=None, jobs: int = 1):
    """All replications of one policy under one information model.

    Replication seeds derive from the master seed by index, so results are
    byte-identical regardless of the worker count; the random policy gets
    its own stream split off each replication seed.
    """
    seeds = replication_seeds(cfg.master_seed, cfg.replications)
    tasks = [(cfg, kind, field, ipi, s) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            ledgers = list(pool.map(_experiment_task, tasks))
    else:
        ledgers = [_experiment_task(t) for t in tasks]
    return ledgers, aggregate(ledgers)


def aggregate(ledgers: list) -> Summary:
    if not ledgers:
        raise ValueError("need at least one ledger")
    n = len(ledgers)
    lra = np.stack([led.lra for led in ledgers])
    mean = lra.mean(axis=0)
    if n > 1:
        half = 1.96 * lra.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        half = np.zeros_like(mean)
    ov = np.array([led.mean_overlap for led in ledgers])
    ov_half = 1.96 * ov.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return Summary(
        t=ledgers[0].t,
        lra_mean=mean,
        lra_lo=mean - half,
        lra_hi=mean + half,
        overlap_mean=float(ov.mean()),
        overlap_lo=float(ov.mean() - ov_half),
        overlap_hi=float(ov.mean() + ov_half),
        n=n,
    )
