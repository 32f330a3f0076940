import math

import numpy as np
import pytest

from mfcache.errors import BarrierViolationError, ConfigError
from mfcache.policies import BaselinePolicy, IpiModel, UniformRandomPolicy
from mfcache.radio import NetworkRealization, RadioEnvironment, dbm_to_watts
from mfcache.simulate import (
    CostLedger,
    SbsState,
    SimConfig,
    aggregate,
    empirical_overlap,
    instantaneous_cost,
    next_storage,
    replication_seeds,
    run_replication,
    step_storage,
)

ENV = RadioEnvironment(
    sbs_density=0.03,
    user_density=1e-4,
    tx_power=dbm_to_watts(23.0),
    pathloss_exp=4.0,
    antennas=1,
    noise=dbm_to_watts(-70.0),
    ball_radius=10.0 / math.sqrt(math.pi),
)


def make_cfg(**kw):
    base = dict(env=ENV, rate=4.0, area=(120.0, 120.0), horizon=1.0, dt=0.01,
                replications=3, master_seed=11, storage_weight=-2.0)
    base.update(kw)
    return SimConfig(**base)


class TestStorageStep:
    def test_balanced_drift(self):
        cfg = make_cfg(discard_rate=0.1, content_size=1.0, dt=1.0)
        assert next_storage(0.5, 0.1, cfg) == pytest.approx(0.5)

    def test_euler_step(self):
        cfg = make_cfg(discard_rate=0.1, content_size=1.0, dt=1.0)
        assert next_storage(0.5, 0.0, cfg) == pytest.approx(0.6)

    def test_clip_at_capacity(self):
        cfg = make_cfg(discard_rate=0.5, content_size=1.0, dt=1.0, storage_capacity=1.0)
        assert next_storage(1.0, 0.0, cfg) == pytest.approx(1.0)
        assert next_storage(0.05, 0.9, cfg) == pytest.approx(0.0)

    def test_state_wrapper_tracks_history(self):
        cfg = make_cfg(dt=0.5)
        s = SbsState(position=np.zeros(2), storage=0.5)
        s = step_storage(s, 0.3, cfg)
        s = step_storage(s, 0.2, cfg)
        assert s.fraction_history == [0.3, 0.2]


class TestInstantaneousCost:
    def test_idle_policy_pays_storage_only(self):
        cfg = make_cfg(storage_weight=1.5, backhaul_limit=1.0)
        val = instantaneous_cost(0.0, 0.25, 0.5, 0.0, 4.0, cfg)
        assert val == pytest.approx(1.5 * 0.75, rel=1e-12)

    def test_empty_storage_zero_storage_term(self):
        cfg = make_cfg(storage_weight=1.5)
        assert instantaneous_cost(0.0, 1.0, 0.5, 0.0, 4.0, cfg) == pytest.approx(0.0)

    def test_barrier_value(self):
        cfg = make_cfg(storage_weight=0.0)
        val = instantaneous_cost(0.5, 1.0, 1.0, 0.0, 1.0, cfg)
        assert val == pytest.approx(-math.log(0.5), rel=1e-12)

    def test_barrier_violation_signalled(self):
        cfg = make_cfg()
        with pytest.raises(BarrierViolationError):
            instantaneous_cost(1.0, 0.5, 0.5, 0.0, 4.0, cfg)

    def test_popularity_floor_in_denominator(self):
        cfg = make_cfg(storage_weight=0.0)
        val = instantaneous_cost(0.5, 1.0, 0.0, 0.0, 1.0, cfg)
        assert val == pytest.approx(-math.log(0.5) / 1e-3, rel=1e-9)


class TestEmpiricalOverlap:
    def _real(self, positions):
        pts = np.asarray(positions, dtype=float)
        return NetworkRealization(pts, np.array([[60.0, 60.0]]),
                                  np.ones(len(pts), dtype=bool), (120.0, 120.0))

    def test_all_idle_neighbors(self):
        cfg = make_cfg(request_range=10.0)
        real = self._real([[60.0, 58.0], [60.0, 62.0]])
        assert empirical_overlap(real, np.zeros(2), np.array([60.0, 60.0]), cfg) == 0.0

    def test_two_neighbor_value(self):
        cfg = make_cfg(request_range=10.0, storage_capacity=1.0, neighbor_degeneracy=20.0)
        real = self._real([[60.0, 58.0], [60.0, 62.0]])
        val = empirical_overlap(real, np.array([0.5, 0.5]), np.array([60.0, 60.0]), cfg)
        assert val == pytest.approx(1.0 / 20.0, rel=1e-12)

    def test_linearity(self):
        cfg = make_cfg(request_range=10.0)
        real = self._real([[60.0, 58.0], [60.0, 62.0], [65.0, 60.0]])
        p = np.array([0.2, 0.4, 0.3])
        v1 = empirical_overlap(real, p, np.array([60.0, 60.0]), cfg)
        v2 = empirical_overlap(real, 2.0 * p, np.array([60.0, 60.0]), cfg)
        assert v2 == pytest.approx(2.0 * v1, rel=1e-12)

    def test_excludes_tagged_and_far(self):
        cfg = make_cfg(request_range=10.0, neighbor_degeneracy=20.0)
        real = self._real([[60.0, 60.5], [60.0, 62.0], [60.0, 100.0]])
        val = empirical_overlap(real, np.array([0.9, 0.5, 0.5]),
                                np.array([60.0, 60.0]), cfg, exclude=0)
        assert val == pytest.approx(0.5 / 20.0, rel=1e-12)

    def test_empty_neighborhood(self):
        cfg = make_cfg(request_range=1.0)
        real = self._real([[0.0, 30.0]])
        assert empirical_overlap(real, np.array([0.7]), np.array([60.0, 60.0]), cfg) == 0.0


class TestRunReplication:
    def test_zero_horizon(self):
        cfg = make_cfg(horizon=0.0, dt=0.01)
        led = run_replication(cfg, BaselinePolicy(), IpiModel(), seed=5)
        assert led.final_lra == 0.0
        assert len(led.t) == 1

    def test_constant_cost_integrates_exactly(self):
        # rate=0 keeps the baseline idle; e=0 freezes storage, so the cost
        # is the constant gamma*(C-q0)/C and LRA(T) = c*T
        cfg = make_cfg(rate=0.0, discard_rate=0.0, storage_weight=2.0, q0=0.25,
                       volatility=0.0, horizon=1.0, dt=0.05)
        led = run_replication(cfg, BaselinePolicy(), IpiModel(), seed=5)
        c = 2.0 * 0.75
        assert abs(led.final_lra - c * 1.0) < 1e-12
        assert led.barrier_hits == 0

    def test_lra_is_trapezoid_of_cost(self):
        cfg = make_cfg(horizon=0.5, dt=0.01)
        led = run_replication(cfg, BaselinePolicy(), IpiModel(), seed=9)
        ref = float(np.sum(0.5 * (led.cost[1:] + led.cost[:-1]) * np.diff(led.t)))
        assert abs(led.final_lra - ref) < 1e-12

    def test_deterministic_under_seed(self):
        cfg = make_cfg(horizon=0.3)
        a = run_replication(cfg, BaselinePolicy(), IpiModel(bias=0.1, sd=0.01), seed=3)
        b = run_replication(cfg, BaselinePolicy(), IpiModel(bias=0.1, sd=0.01), seed=3)
        assert np.array_equal(a.cost, b.cost)
        assert np.array_equal(a.overlap, b.overlap)

    def test_random_policy_runs_feasibly(self):
        cfg = make_cfg(horizon=0.3)
        led = run_replication(cfg, UniformRandomPolicy(seed=2), IpiModel(), seed=3)
        assert np.isfinite(led.cost).all()
        assert led.barrier_hits == 0

    def test_dt_must_divide_horizon(self):
        with pytest.raises(ConfigError):
            make_cfg(horizon=1.0, dt=0.3)


class TestAggregate:
    def _ledger(self, lra_final, seed=0):
        t = np.linspace(0.0, 1.0, 11)
        cost = np.full(11, lra_final)
        lra = cost * t
        return CostLedger(t=t, cost=cost, overlap=0.1 * cost, usage=0.5 * np.ones(11),
                          lra=lra, barrier_hits=0, seed=seed)

    def test_single_ledger_zero_band(self):
        summ = aggregate([self._ledger(2.0)])
        assert np.array_equal(summ.lra_mean, summ.lra_lo)
        assert np.array_equal(summ.lra_mean, summ.lra_hi)

    def test_identical_ledgers_zero_band(self):
        summ = aggregate([self._ledger(2.0, seed=j) for j in range(5)])
        assert np.allclose(summ.lra_hi - summ.lra_lo, 0.0)

    def test_band_shrinks_like_root_n(self):
        rng = np.random.default_rng(8)

        def width(n):
            leds = [self._ledger(2.0 + rng.standard_normal()) for _ in range(n)]
            summ = aggregate(leds)
            return float((summ.lra_hi - summ.lra_lo)[-1])

        w5, w20, w80 = width(5), width(20), width(80)
        # CLT scaling: each quadrupling roughly halves the band
        assert w20 < w5 * 0.8
        assert w80 < w20 * 0.8
        assert w80 < w5 * 0.45

    def test_requires_ledgers(self):
        with pytest.raises(ValueError):
            aggregate([])


class TestSeeds:
    def test_deterministic_and_distinct(self):
        a = replication_seeds(123, 8)
        b = replication_seeds(123, 8)
        assert a == b
        assert len(set(a)) == 8
        assert replication_seeds(124, 8) != a
