"""Caching policies behind one decide() interface, plus the IPI observation model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .demand import X_MIN
from .errors import MfcacheError
from .mfg import Lattice, PolicyField


@dataclass(frozen=True)
class DecisionContext:
    """Shared constants every policy sees when deciding a caching fraction."""

    backhaul_limit: float         # B
    content_size: float           # L
    storage_capacity: float       # C
    rate: float                   # average rate per unit bandwidth
    overlap_estimate: float = 0.0
    barrier_margin: float = 1e-6

    @property
    def max_fraction(self) -> float:
        b_eff = self.backhaul_limit * (1.0 - self.barrier_margin)
        return min(1.0, self.storage_capacity / self.content_size,
                   b_eff / self.content_size)


@dataclass(frozen=True)
class IpiModel:
    """Observation error x_hat = x + Delta with Delta ~ N(bias, sd^2)."""

    bias: float = 0.0
    sd: float = 0.0

    def __post_init__(self):
        if self.sd < 0:
            raise ValueError("sd must be nonnegative")

    @property
    def is_perfect(self) -> bool:
        return self.bias == 0.0 and self.sd == 0.0


def observe_popularity(x, ipi: IpiModel, rng: np.random.Generator):
    """Observed request probability, clipped to [x_min, 1].

    Perfect information (bias = sd = 0) reproduces x exactly, including
    values below the clipping floor.
    """
    x = np.asarray(x, dtype=float)
    if ipi.is_perfect:
        return x.copy()
    delta = ipi.bias + ipi.sd * rng.standard_normal(x.shape)
    return np.clip(x + delta, X_MIN, 1.0)


class MeanFieldPolicy:
    """Lookup of the precomputed equilibrium caching field.

    Bilinear interpolation in (x, Q), nearest slice in t. Queries beyond one
    cell outside the lattice are rejected.
    """

    kind = "mf"

    def __init__(self, field: PolicyField):
        self.field = field
        self.lattice: Lattice = field.lattice

    def decide(self, x, q, t: float, ctx: DecisionContext):
        lat = self.lattice
        x = np.asarray(x, dtype=float)
        q = np.asarray(q, dtype=float)
        if (x < -lat.dx).any() or (x > 1.0 + lat.dx).any():
            raise MfcacheError("popularity query outside lattice by more than one cell")
        if (q < -lat.dq).any() or (q > lat.q_max + lat.dq).any():
            raise MfcacheError("storage query outside lattice by more than one cell")
        if t < -lat.dt or t > lat.horizon + lat.dt:
            raise MfcacheError("time query outside lattice by more than one cell")
        n = int(round(min(max(t, 0.0), lat.horizon) / lat.dt))
        grid = self.field.values[n]

        fx = np.clip(x / lat.dx - 0.5, 0.0, lat.nx - 1.0)
        fq = np.clip(q / lat.dq - 0.5, 0.0, lat.nq - 1.0)
        i0 = np.minimum(fx.astype(int), lat.nx - 2) if lat.nx > 1 else np.zeros_like(fx, dtype=int)
        j0 = np.minimum(fq.astype(int), lat.nq - 2) if lat.nq > 1 else np.zeros_like(fq, dtype=int)
        wx = fx - i0
        wq = fq - j0
        i1 = np.minimum(i0 + 1, lat.nx - 1)
        j1 = np.minimum(j0 + 1, lat.nq - 1)
        val = (
            grid[i0, j0] * (1 - wx) * (1 - wq)
            + grid[i1, j0] * wx * (1 - wq)
            + grid[i0, j1] * (1 - wx) * wq
            + grid[i1, j1] * wx * wq
        )
        return np.clip(val, 0.0, ctx.max_fraction)


class BaselinePolicy:
    """Popularity-proportional rule, blind to content overlap:
    p = (1/L) [B - 1/(1 + rate*x)]^+."""

    kind = "baseline"

    def decide(self, x, q, t: float, ctx: DecisionContext):
        x = np.asarray(x, dtype=float)
        bracket = ctx.backhaul_limit - 1.0 / (1.0 + ctx.rate * x)
        p = np.maximum(bracket, 0.0) / ctx.content_size
        return np.clip(p, 0.0, ctx.max_fraction)


class UniformRandomPolicy:
    """Popularity-agnostic: uniform draw on [0, max feasible fraction]."""

    kind = "random"

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def decide(self, x, q, t: float, ctx: DecisionContext):
        shape = np.broadcast(np.asarray(x, dtype=float), np.asarray(q, dtype=float)).shape
        return self.rng.uniform(0.0, ctx.max_fraction, size=shape)


def make_policy(kind: str, field: PolicyField = None, seed=None):
    if kind == "mf":
        if field is None:
            raise MfcacheError("mean-field policy needs a solved PolicyField")
        return MeanFieldPolicy(field)
    if kind == "baseline":
        return BaselinePolicy()
    if kind == "random":
        return UniformRandomPolicy(seed)
    raise ValueError(f"unknown policy kind {kind!r}")
