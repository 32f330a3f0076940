"""Spatio-temporal content demand: CRP long-term popularity, OU short-term dynamics.

Long-term mean popularities come from a Chinese-restaurant-process request
history (preferential attachment over a finite catalog). Short-term request
probabilities fluctuate around those means as a mean-reverting
Ornstein-Uhlenbeck process integrated with Euler-Maruyama.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Floor applied to the request probability wherever it sits in a denominator
# (the instantaneous cost divides by x and is unbounded at x -> 0).
X_MIN = 1e-3


@dataclass
class CrpState:
    """Request history of one SBS: per-content counts n_j, total N, CRP constants."""

    catalog_size: int
    theta: float = 1.0
    discount: float = 0.5
    request_counts: np.ndarray = field(default=None)
    total_requests: int = 0

    def __post_init__(self):
        if self.catalog_size < 1:
            raise ValueError("catalog_size must be >= 1")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.request_counts is None:
            self.request_counts = np.zeros(self.catalog_size, dtype=np.int64)
        else:
            self.request_counts = np.asarray(self.request_counts, dtype=np.int64)
            if self.request_counts.shape != (self.catalog_size,):
                raise ValueError("request_counts must have catalog_size entries")
            if (self.request_counts < 0).any():
                raise ValueError("request_counts must be nonnegative")
            if self.request_counts.sum() != self.total_requests:
                raise ValueError("sum(request_counts) must equal total_requests")

    def copy(self) -> "CrpState":
        return CrpState(
            catalog_size=self.catalog_size,
            theta=self.theta,
            discount=self.discount,
            request_counts=self.request_counts.copy(),
            total_requests=self.total_requests,
        )

    @property
    def requested_mask(self) -> np.ndarray:
        return self.request_counts > 0

    @property
    def n_requested(self) -> int:
        return int(np.count_nonzero(self.request_counts))


def crp_probabilities(state: CrpState) -> np.ndarray:
    """Mean popularity of every content file; sums to one.

    Requested files carry (n_j - nu) / (N + theta). The aggregate new-file
    mass (nu*|U_r| + theta) / (N + theta) is split uniformly over the
    unrequested files. If the catalog is exhausted (no unrequested file is
    left) the leftover mass is redistributed proportionally over the
    requested weights so the distribution still normalizes.
    """
    n = state.request_counts.astype(float)
    mask = state.requested_mask
    k = int(np.count_nonzero(mask))
    denom = state.total_requests + state.theta
    probs = np.zeros(state.catalog_size)
    if k == 0:
        probs[:] = 1.0 / state.catalog_size
        return probs
    weights = np.where(mask, n - state.discount, 0.0)
    n_unrequested = state.catalog_size - k
    if n_unrequested > 0:
        probs[mask] = weights[mask] / denom
        new_mass = (state.discount * k + state.theta) / denom
        probs[~mask] = new_mass / n_unrequested
    else:
        probs = weights / weights.sum()
    return probs


def crp_mean_popularity(state: CrpState, j: int) -> float:
    """Mean popularity of content j under the current request history."""
    if not 0 <= j < state.catalog_size:
        raise IndexError(f"content index {j} out of range")
    return float(crp_probabilities(state)[j])


def crp_sample_request(state: CrpState, rng: np.random.Generator) -> int:
    """Draw one content request from the mean-popularity law and record it.

    Mutates the state: increments the drawn file's counter and the total.
    """
    probs = crp_probabilities(state)
    j = int(rng.choice(state.catalog_size, p=probs))
    state.request_counts[j] += 1
    state.total_requests += 1
    return j


def expected_distinct_files(total_requests: int, theta: float, discount: float) -> float:
    """Asymptotic mean number of distinct requested files after N requests.

    Gamma(theta+1) / (nu * Gamma(theta+nu)) * N^nu for nu > 0, and
    theta * log(N + theta) for nu = 0.
    """
    if discount < 0:
        raise ValueError("discount must be nonnegative")
    if total_requests < 1:
        raise ValueError("total_requests must be >= 1")
    if discount == 0.0:
        return theta * math.log(total_requests + theta)
    return (
        math.gamma(theta + 1.0)
        / (discount * math.gamma(theta + discount))
        * total_requests**discount
    )


@dataclass(frozen=True)
class OuParams:
    """Mean-reverting dynamics dx = r (mu - x) dt + eta dW."""

    reversion_rate: float
    volatility: float
    mean: float
    dt: float

    def __post_init__(self):
        if self.reversion_rate <= 0:
            raise ValueError("reversion_rate must be positive")
        if self.volatility < 0:
            raise ValueError("volatility must be nonnegative")
        if not 0.0 <= self.mean <= 1.0:
            raise ValueError("mean must lie in [0, 1]")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class DemandState:
    """Request probabilities x (scalar or vector) at simulation time t."""

    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if ((self.x < 0.0) | (self.x > 1.0)).any():
            raise ValueError("request probabilities must lie in [0, 1]")


def ou_step(state: DemandState, params: OuParams, rng: np.random.Generator) -> DemandState:
    """One Euler-Maruyama step, clipped to [0, 1]."""
    w = rng.standard_normal(state.x.shape)
    x_new = (
        state.x
        + params.reversion_rate * (params.mean - state.x) * params.dt
        + params.volatility * math.sqrt(params.dt) * w
    )
    np.clip(x_new, 0.0, 1.0, out=x_new)
    return DemandState(x=x_new, t=state.t + params.dt)
