"""Coupled backward HJB / forward FPK solver on a (t, x, Q) lattice.

State: request probability x in [0,1] and remaining storage Q in [0,C].
Dynamics: dx = r(mu - x)dt + eta dW, dQ = (e - L p)dt. The density is
transported by a conservative flux-form upwind scheme (central diffusion in
x, zero-flux walls), the value function by an explicit monotone upwind
scheme with zero-gradient extrapolation at the walls. Both run under the
same explicit stability bound. The mean-field equilibrium is a damped
Picard iteration between the two solves, coupled through the content
overlap integral.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .demand import X_MIN
from .errors import CflViolationError, NonConvergenceError

CFL_SAFETY = 0.9
MASS_DRIFT_LIMIT = 1e-3
NEGATIVITY_LIMIT = -1e-12


@dataclass(frozen=True)
class Lattice:
    """Uniform cell-centered discretization of (t, x, Q)."""

    nx: int
    nq: int
    nt: int
    horizon: float = 1.0
    q_max: float = 1.0

    def __post_init__(self):
        if min(self.nx, self.nq, self.nt) < 1:
            raise ValueError("nx, nq, nt must be positive")
        if self.horizon <= 0 or self.q_max <= 0:
            raise ValueError("horizon and q_max must be positive")

    @property
    def dx(self) -> float:
        return 1.0 / self.nx

    @property
    def dq(self) -> float:
        return self.q_max / self.nq

    @property
    def dt(self) -> float:
        return self.horizon / self.nt

    @property
    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    @property
    def q_centers(self) -> np.ndarray:
        return (np.arange(self.nq) + 0.5) * self.dq

    @property
    def t_knots(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt


@dataclass(frozen=True)
class SolverConfig:
    """Content parameters, cost constants, and fixed-point knobs."""

    rate: float                   # average rate per unit bandwidth, from radio
    content_size: float = 1.0     # L
    discard_rate: float = 0.1     # e
    backhaul_limit: float = 1.0   # B
    storage_capacity: float = 1.0    # C
    storage_weight: float = 0.0      # gamma (sign free; presets may reward caching)
    neighbor_degeneracy: float = 20.0  # N_r
    reversion_rate: float = 1.0   # r
    volatility: float = 0.1       # eta
    mean_popularity: float = 0.5  # mu
    damping: float = 0.5          # omega
    tol: float = 1e-4
    max_iters: int = 200
    terminal_value: float = 0.0
    denom_floor: float = 1e-6     # floor on dQ v in the control formula
    barrier_margin: float = 1e-6  # delta_B relative to B
    x_min: float = X_MIN

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be nonnegative")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValueError("tol must be positive and max_iters >= 1")
        if min(self.content_size, self.backhaul_limit, self.storage_capacity) <= 0:
            raise ValueError("content_size, backhaul_limit, storage_capacity must be positive")
        if self.denom_floor <= 0:
            raise ValueError("denom_floor must be positive")

    @property
    def max_fraction(self) -> float:
        """Feasible ceiling min(1, C/L, (B - delta_B)/L)."""
        b_eff = self.backhaul_limit * (1.0 - self.barrier_margin)
        return min(1.0, self.storage_capacity / self.content_size, b_eff / self.content_size)

    def max_drift_x(self) -> float:
        return self.reversion_rate * max(self.mean_popularity, 1.0 - self.mean_popularity)

    def max_drift_q(self) -> float:
        swing = self.content_size * self.max_fraction - self.discard_rate
        return max(self.discard_rate, abs(swing))


@dataclass
class ValueSurface:
    values: np.ndarray  # (nt+1, nx, nq)
    lattice: Lattice


@dataclass
class DensitySurface:
    values: np.ndarray  # (nt+1, nx, nq)
    lattice: Lattice
    max_mass_drift: float = 0.0
    min_density: float = 0.0

    def slice_mass(self, n: int) -> float:
        return float(self.values[n].sum() * self.lattice.dx * self.lattice.dq)


@dataclass
class PolicyField:
    values: np.ndarray  # (nt+1, nx, nq)
    lattice: Lattice


@dataclass
class HjbSolution:
    value: ValueSurface
    policy: PolicyField
    overlap: np.ndarray  # mean-field overlap per time knot


@dataclass
class MfeSolution:
    value: ValueSurface
    density: DensitySurface
    policy: PolicyField
    overlap: np.ndarray
    iterations: int
    change_history: list = field(default_factory=list)


def stable_dt(lattice: Lattice, cfg: SolverConfig) -> float:
    """Largest explicit step allowed by the CFL-type bound."""
    denom = (
        cfg.volatility**2 / lattice.dx**2
        + cfg.max_drift_x() / lattice.dx
        + cfg.max_drift_q() / lattice.dq
    )
    if denom == 0.0:
        return math.inf
    return CFL_SAFETY / denom


def check_stability(lattice: Lattice, cfg: SolverConfig) -> None:
    bound = stable_dt(lattice, cfg)
    if lattice.dt > bound * (1.0 + 1e-12):
        raise CflViolationError(
            f"dt={lattice.dt:.3e} exceeds stability bound {bound:.3e}; "
            f"increase nt to at least {math.ceil(lattice.horizon / bound)}"
        )


def make_lattice(
    nx: int, nq: int, horizon: float, cfg: SolverConfig, q_max: float = None, nt: int = None
) -> Lattice:
    """Build a lattice whose dt is auto-shrunk to satisfy the stability bound."""
    q_max = cfg.storage_capacity if q_max is None else q_max
    if nt is None:
        probe = Lattice(nx=nx, nq=nq, nt=1, horizon=horizon, q_max=q_max)
        bound = stable_dt(probe, cfg)
        nt = max(1, math.ceil(horizon / bound))
    lat = Lattice(nx=nx, nq=nq, nt=nt, horizon=horizon, q_max=q_max)
    check_stability(lat, cfg)
    return lat


def optimal_caching_fraction(
    backhaul: float,
    content_size: float,
    overlap,
    rate: float,
    x,
    dqv,
    cfg: SolverConfig,
):
    """Closed-form argmin of the control bracket: clamped water filling.

    p* = clamp((1/L) [B - (1 + I) / (rate * x * max(dQv, eps))]^+, 0, p_max).
    Total on any input: non-positive storage value yields p* = 0 through the
    denominator floor and the positive part.
    """
    x_eff = np.maximum(np.asarray(x, dtype=float), cfg.x_min)
    dqv_eff = np.maximum(np.asarray(dqv, dtype=float), cfg.denom_floor)
    denom = np.maximum(rate * x_eff * dqv_eff, 1e-300)
    bracket = backhaul - (1.0 + np.asarray(overlap, dtype=float)) / denom
    p = np.maximum(bracket, 0.0) / content_size
    return np.minimum(p, cfg.max_fraction)


def mf_overlap(m_slice: np.ndarray, p_slice: np.ndarray, cfg: SolverConfig, lattice: Lattice) -> float:
    """Mean-field content overlap: integral of m*p / (C * N_r) over the slice."""
    cell = lattice.dx * lattice.dq
    return float(
        np.sum(m_slice * p_slice) * cell / (cfg.storage_capacity * cfg.neighbor_degeneracy)
    )


def backhaul_cost(p, cfg: SolverConfig):
    """Barrier cost -log(B - L p); infinite at the backhaul limit."""
    gap = cfg.backhaul_limit - cfg.content_size * np.asarray(p, dtype=float)
    return -np.log(gap)


def running_cost(p, q, x, overlap, cfg: SolverConfig):
    """Instantaneous cost on a slice: barrier term scaled by overlap and rate
    plus the storage occupation term."""
    x_eff = np.maximum(np.asarray(x, dtype=float), cfg.x_min)
    phi = backhaul_cost(p, cfg)
    backhaul = np.where(phi == 0.0, 0.0, phi * (1.0 + overlap) / (cfg.rate * x_eff))
    storage = cfg.storage_weight * (cfg.storage_capacity - np.asarray(q, dtype=float)) / cfg.storage_capacity
    return backhaul + storage


def _dqv_central(v: np.ndarray, dq: float) -> np.ndarray:
    """Central Q-derivative with one-sided stencils at the walls."""
    d = np.empty_like(v)
    d[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2.0 * dq)
    d[:, 0] = (v[:, 1] - v[:, 0]) / dq
    d[:, -1] = (v[:, -1] - v[:, -2]) / dq
    return d


def initial_density(
    lattice: Lattice,
    q_mean: float,
    q_sd: float,
    x_mode: str = "stationary",
    x_value: float = 0.5,
    x_sd: float = None,
    cfg: SolverConfig = None,
) -> np.ndarray:
    """Normalized product density: Gaussian in Q times a profile in x.

    x_mode 'point' puts the x-mass in the cell containing x_value,
    'gaussian' uses N(x_value, x_sd^2), 'stationary' uses the OU stationary
    law N(mu, eta^2 / 2r) from the solver config.
    """
    q = lattice.q_centers
    qp = np.exp(-0.5 * ((q - q_mean) / max(q_sd, 1e-9)) ** 2)
    if x_mode == "point":
        xp = np.zeros(lattice.nx)
        idx = min(lattice.nx - 1, max(0, int(x_value / lattice.dx)))
        xp[idx] = 1.0
    elif x_mode == "gaussian":
        xs = max(x_sd if x_sd is not None else 0.05, 1e-9)
        xp = np.exp(-0.5 * ((lattice.x_centers - x_value) / xs) ** 2)
    elif x_mode == "stationary":
        if cfg is None:
            raise ValueError("stationary x_mode needs the solver config")
        sd = cfg.volatility / math.sqrt(2.0 * cfg.reversion_rate) if cfg.volatility > 0 else 1e-9
        xp = np.exp(-0.5 * ((lattice.x_centers - cfg.mean_popularity) / max(sd, 1e-9)) ** 2)
    else:
        raise ValueError(f"unknown x_mode {x_mode!r}")
    m0 = np.outer(xp, qp)
    m0 /= m0.sum() * lattice.dx * lattice.dq
    return m0


def solve_fpk_forward(
    lattice: Lattice, policy: PolicyField, cfg: SolverConfig, m0: np.ndarray
) -> DensitySurface:
    """Transport the density forward under the given policy field.

    Conservative flux-form upwind advection in x and Q, central diffusion in
    x, zero-flux walls. Each slice is renormalized after the step; the
    pre-correction drift is recorded and must stay tiny for a sound scheme.
    """
    check_stability(lattice, cfg)
    m0 = np.asarray(m0, dtype=float)
    if (m0 < 0).any():
        raise ValueError("initial density must be nonnegative")
    mass0 = m0.sum() * lattice.dx * lattice.dq
    if abs(mass0 - 1.0) > 1e-8:
        raise ValueError("initial density must integrate to one")

    nx, nq, nt = lattice.nx, lattice.nq, lattice.nt
    dx, dq, dt = lattice.dx, lattice.dq, lattice.dt
    diff = 0.5 * cfg.volatility**2

    # x-interface drift r(mu - x) is policy independent
    x_faces = np.arange(1, nx) * dx
    bx = cfg.reversion_rate * (cfg.mean_popularity - x_faces)  # (nx-1,)
    bx_pos = np.maximum(bx, 0.0)[:, None]
    bx_neg = np.minimum(bx, 0.0)[:, None]

    m = np.empty((nt + 1, nx, nq))
    m[0] = m0
    max_drift = 0.0
    min_density = float(m0.min())

    for n in range(nt):
        cur = m[n]
        p = policy.values[n]

        fx = bx_pos * cur[:-1, :] + bx_neg * cur[1:, :]          # advective x-flux
        fx -= diff * (cur[1:, :] - cur[:-1, :]) / dx             # diffusive x-flux

        bq = cfg.discard_rate - cfg.content_size * 0.5 * (p[:, :-1] + p[:, 1:])
        fq = np.maximum(bq, 0.0) * cur[:, :-1] + np.minimum(bq, 0.0) * cur[:, 1:]

        nxt = cur.copy()
        nxt[:-1, :] -= dt / dx * fx
        nxt[1:, :] += dt / dx * fx
        nxt[:, :-1] -= dt / dq * fq
        nxt[:, 1:] += dt / dq * fq

        lo = float(nxt.min())
        min_density = min(min_density, lo)
        if lo < NEGATIVITY_LIMIT:
            raise CflViolationError(
                f"density fell to {lo:.3e} at step {n + 1}; upwind scheme violated"
            )
        mass = nxt.sum() * dx * dq
        max_drift = max(max_drift, abs(mass - 1.0))
        if abs(mass - 1.0) > MASS_DRIFT_LIMIT:
            raise CflViolationError(
                f"mass drifted by {abs(mass - 1.0):.3e} at step {n + 1}"
            )
        m[n + 1] = nxt / mass

    return DensitySurface(m, lattice, max_mass_drift=max_drift, min_density=min_density)


def solve_hjb_backward(lattice: Lattice, m: DensitySurface, cfg: SolverConfig) -> HjbSolution:
    """Backward sweep of the modified HJB against a given density surface.

    At each slice the control comes from the closed-form water-filling rule;
    the slice overlap is resolved self-consistently (the overlap integral
    depends on the control being extracted, a scalar fixed point that
    contracts in a few iterations). Advection is upwinded by drift sign,
    diffusion is central, walls use zero-gradient ghosts.
    """
    check_stability(lattice, cfg)
    nx, nq, nt = lattice.nx, lattice.nq, lattice.nt
    dx, dq, dt = lattice.dx, lattice.dq, lattice.dt
    diff = 0.5 * cfg.volatility**2

    x = lattice.x_centers[:, None]
    q = lattice.q_centers[None, :]
    bx = cfg.reversion_rate * (cfg.mean_popularity - x)  # (nx,1)
    bx_pos = np.maximum(bx, 0.0)
    bx_neg = np.minimum(bx, 0.0)

    v = np.empty((nt + 1, nx, nq))
    p = np.zeros((nt + 1, nx, nq))
    overlap = np.zeros(nt + 1)
    v[nt] = cfg.terminal_value

    for n in range(nt - 1, -1, -1):
        vn1 = v[n + 1]
        dqv = _dqv_central(vn1, dq)

        # At the full-storage wall (first Q row) the downward drift is
        # blocked, so caching beyond the discard rate buys nothing; the
        # pinned optimum holds the storage level instead.
        hold = cfg.discard_rate / cfg.content_size
        iov = overlap[n + 1]
        for _ in range(64):
            pc = optimal_caching_fraction(
                cfg.backhaul_limit, cfg.content_size, iov, cfg.rate, x, dqv, cfg
            )
            pc[:, 0] = np.minimum(pc[:, 0], hold)
            iov_new = mf_overlap(m.values[n], pc, cfg, lattice)
            if abs(iov_new - iov) < 1e-12:
                iov = iov_new
                break
            iov = iov_new
        p[n] = pc
        overlap[n] = iov

        cost = running_cost(pc, q, x, iov, cfg)

        dvp_x = np.zeros_like(vn1)
        dvm_x = np.zeros_like(vn1)
        dvp_x[:-1, :] = (vn1[1:, :] - vn1[:-1, :]) / dx
        dvm_x[1:, :] = (vn1[1:, :] - vn1[:-1, :]) / dx

        bq = cfg.discard_rate - cfg.content_size * pc
        dvp_q = np.zeros_like(vn1)
        dvm_q = np.zeros_like(vn1)
        dvp_q[:, :-1] = (vn1[:, 1:] - vn1[:, :-1]) / dq
        dvm_q[:, 1:] = (vn1[:, 1:] - vn1[:, :-1]) / dq

        lap_x = np.zeros_like(vn1)
        lap_x[1:-1, :] = (vn1[2:, :] - 2.0 * vn1[1:-1, :] + vn1[:-2, :]) / dx**2
        lap_x[0, :] = (vn1[1, :] - vn1[0, :]) / dx**2
        lap_x[-1, :] = (vn1[-2, :] - vn1[-1, :]) / dx**2

        v[n] = vn1 + dt * (
            cost
            + bx_pos * dvp_x
            + bx_neg * dvm_x
            + np.maximum(bq, 0.0) * dvp_q
            + np.minimum(bq, 0.0) * dvm_q
            + diff * lap_x
        )
        if not np.isfinite(v[n]).all():
            raise CflViolationError(f"value function lost finiteness at step {n}")

    return HjbSolution(ValueSurface(v, lattice), PolicyField(p, lattice), overlap)


def solve_mfe(
    lattice: Lattice, cfg: SolverConfig, m0: np.ndarray, p0: PolicyField = None
) -> MfeSolution:
    """Damped Picard iteration to the mean-field equilibrium.

    Alternates the forward FPK transport under the current policy with the
    backward HJB extraction of a new policy, blending with weight omega,
    until the sup-norm change of the policy iterate drops below tol.
    """
    shape = (lattice.nt + 1, lattice.nx, lattice.nq)
    p_cur = np.zeros(shape) if p0 is None else np.array(p0.values, dtype=float)
    history = []
    for it in range(1, cfg.max_iters + 1):
        density = solve_fpk_forward(lattice, PolicyField(p_cur, lattice), cfg, m0)
        hjb = solve_hjb_backward(lattice, density, cfg)
        p_next = cfg.damping * hjb.policy.values + (1.0 - cfg.damping) * p_cur
        change = float(np.max(np.abs(p_next - p_cur)))
        history.append(change)
        p_cur = p_next
        if change < cfg.tol:
            return MfeSolution(
                value=hjb.value,
                density=density,
                policy=PolicyField(p_cur, lattice),
                overlap=hjb.overlap,
                iterations=it,
                change_history=history,
            )
    raise NonConvergenceError(
        f"MFE iteration did not converge in {cfg.max_iters} iterations "
        f"(last change {history[-1]:.3e})",
        history=history,
    )


def _dilate(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        grown = out.copy()
        grown[:-1, :] |= out[1:, :]
        grown[1:, :] |= out[:-1, :]
        grown[:, :-1] |= out[:, 1:]
        grown[:, 1:] |= out[:, :-1]
        out = grown
    return out


def hjb_residual(
    lattice: Lattice,
    sol_value: ValueSurface,
    sol_policy: PolicyField,
    overlap: np.ndarray,
    cfg: SolverConfig,
    stencil: str = "scheme",
    wall_margin: int = 3,
    front_dilate: int = 2,
) -> float:
    """Discrete residual of the HJB with the converged (v, p) plugged back in.

    stencil='scheme' rebuilds the solver's own upwind discretization from
    scratch and measures the defect everywhere: any mismatch between the
    stored value, policy, and overlap series shows up at full size.

    stencil='central' replaces the advection stencils with central
    differences, an independent discretization whose defect is the O(dx)
    truncation of the first-order scheme. That claim only holds where the
    value function is twice differentiable, so cells on the policy clamp
    fronts (where v has viscosity-solution corners) and a thin wall layer
    are excluded.
    """
    if stencil not in ("scheme", "central"):
        raise ValueError(f"unknown stencil {stencil!r}")
    nx, nq, nt = lattice.nx, lattice.nq, lattice.nt
    dx, dq, dt = lattice.dx, lattice.dq, lattice.dt
    x = lattice.x_centers[:, None]
    q = lattice.q_centers[None, :]
    bx = cfg.reversion_rate * (cfg.mean_popularity - x)
    bx_pos = np.maximum(bx, 0.0)
    bx_neg = np.minimum(bx, 0.0)
    diff = 0.5 * cfg.volatility**2
    v = sol_value.values
    pmax = cfg.max_fraction
    worst = 0.0
    for n in range(nt):
        vn1 = v[n + 1]
        pc = sol_policy.values[n]
        cost = running_cost(pc, q, x, overlap[n], cfg)
        bq = cfg.discard_rate - cfg.content_size * pc

        if stencil == "scheme":
            dvp_x = np.zeros_like(vn1)
            dvm_x = np.zeros_like(vn1)
            dvp_x[:-1, :] = (vn1[1:, :] - vn1[:-1, :]) / dx
            dvm_x[1:, :] = (vn1[1:, :] - vn1[:-1, :]) / dx
            dvp_q = np.zeros_like(vn1)
            dvm_q = np.zeros_like(vn1)
            dvp_q[:, :-1] = (vn1[:, 1:] - vn1[:, :-1]) / dq
            dvm_q[:, 1:] = (vn1[:, 1:] - vn1[:, :-1]) / dq
            lap_x = np.zeros_like(vn1)
            lap_x[1:-1, :] = (vn1[2:, :] - 2.0 * vn1[1:-1, :] + vn1[:-2, :]) / dx**2
            lap_x[0, :] = (vn1[1, :] - vn1[0, :]) / dx**2
            lap_x[-1, :] = (vn1[-2, :] - vn1[-1, :]) / dx**2
            res = (
                (vn1 - v[n]) / dt
                + cost
                + bx_pos * dvp_x
                + bx_neg * dvm_x
                + np.maximum(bq, 0.0) * dvp_q
                + np.minimum(bq, 0.0) * dvm_q
                + diff * lap_x
            )
            worst = max(worst, float(np.max(np.abs(res))))
            continue

        dv_x = (vn1[2:, 1:-1] - vn1[:-2, 1:-1]) / (2.0 * dx)
        dv_q = (vn1[1:-1, 2:] - vn1[1:-1, :-2]) / (2.0 * dq)
        lap_x = (vn1[2:, 1:-1] - 2.0 * vn1[1:-1, 1:-1] + vn1[:-2, 1:-1]) / dx**2
        res = (
            (vn1[1:-1, 1:-1] - v[n][1:-1, 1:-1]) / dt
            + cost[1:-1, 1:-1]
            + bx[1:-1] * dv_x
            + bq[1:-1, 1:-1] * dv_q
            + diff * lap_x
        )
        cat = np.where(pc <= 0.0, 0, np.where(pc >= pmax - 1e-12, 2, 1))
        front = np.zeros(cat.shape, dtype=bool)
        front[:-1, :] |= cat[:-1, :] != cat[1:, :]
        front[1:, :] |= cat[1:, :] != cat[:-1, :]
        front[:, :-1] |= cat[:, :-1] != cat[:, 1:]
        front[:, 1:] |= cat[:, 1:] != cat[:, :-1]
        smooth = ~_dilate(front, front_dilate)
        mg = max(wall_margin, 1)
        smooth[:mg, :] = False
        smooth[-mg:, :] = False
        smooth[:, :mg] = False
        smooth[:, -mg:] = False
        sel = smooth[1:-1, 1:-1]
        if sel.any():
            worst = max(worst, float(np.max(np.abs(res[sel]))))
    return worst


def expected_cost(sol: MfeSolution) -> float:
    """Population-average optimal cost at t=0 (the solver-side LRA scalar)."""
    lat = sol.value.lattice
    return float(np.sum(sol.value.values[0] * sol.density.values[0]) * lat.dx * lat.dq)
