import numpy as np
import pytest

from mfcache.errors import MfcacheError
from mfcache.mfg import Lattice, PolicyField
from mfcache.policies import (
    BaselinePolicy,
    DecisionContext,
    IpiModel,
    MeanFieldPolicy,
    UniformRandomPolicy,
    make_policy,
    observe_popularity,
)

CTX = DecisionContext(backhaul_limit=1.0, content_size=1.0, storage_capacity=1.0, rate=3.0)


def ramp_field():
    lat = Lattice(nx=8, nq=8, nt=4, horizon=1.0, q_max=1.0)
    vals = np.empty((5, 8, 8))
    for n in range(5):
        vals[n] = np.add.outer(lat.x_centers * 0.5, lat.q_centers * 0.25) + 0.05 * n
    return PolicyField(vals, lat)


class TestBaseline:
    def test_zero_rate_popularity_product(self):
        ctx = DecisionContext(backhaul_limit=1.0, content_size=1.0,
                              storage_capacity=1.0, rate=0.0)
        assert BaselinePolicy().decide(0.5, 0.5, 0.0, ctx) == pytest.approx(0.0)

    def test_saturates_toward_backhaul(self):
        ctx = DecisionContext(backhaul_limit=1.0, content_size=1.0,
                              storage_capacity=1.0, rate=1e9)
        val = float(BaselinePolicy().decide(1.0, 0.5, 0.0, ctx))
        assert val == pytest.approx(ctx.max_fraction, rel=1e-6)

    def test_nondecreasing_in_popularity(self):
        pol = BaselinePolicy()
        xs = np.linspace(0.0, 1.0, 50)
        vals = np.asarray(pol.decide(xs, np.full(50, 0.5), 0.0, CTX))
        assert (np.diff(vals) >= -1e-15).all()

    def test_deterministic(self):
        pol = BaselinePolicy()
        a = pol.decide(0.37, 0.2, 0.1, CTX)
        b = pol.decide(0.37, 0.2, 0.1, CTX)
        assert a == b


class TestUniformRandom:
    def test_empirical_mean(self):
        pol = UniformRandomPolicy(seed=42)
        draws = pol.decide(np.zeros(100_000), np.zeros(100_000), 0.0, CTX)
        assert abs(draws.mean() - 0.5 * CTX.max_fraction) < 0.01 * CTX.max_fraction

    def test_reproducible_under_seed(self):
        a = UniformRandomPolicy(seed=7).decide(np.zeros(10), np.zeros(10), 0.0, CTX)
        b = UniformRandomPolicy(seed=7).decide(np.zeros(10), np.zeros(10), 0.0, CTX)
        assert np.array_equal(a, b)

    def test_feasible(self):
        draws = UniformRandomPolicy(seed=1).decide(np.zeros(5000), np.zeros(5000), 0.0, CTX)
        assert (draws >= 0.0).all() and (draws <= CTX.max_fraction).all()


class TestMeanField:
    def test_exact_on_nodes(self):
        field = ramp_field()
        pol = MeanFieldPolicy(field)
        lat = field.lattice
        x, q = lat.x_centers[3], lat.q_centers[5]
        got = float(pol.decide(x, q, 0.0, CTX))
        assert got == pytest.approx(field.values[0, 3, 5], rel=1e-12)

    def test_bilinear_between_nodes(self):
        field = ramp_field()
        pol = MeanFieldPolicy(field)
        lat = field.lattice
        x = 0.5 * (lat.x_centers[2] + lat.x_centers[3])
        q = 0.5 * (lat.q_centers[4] + lat.q_centers[5])
        expected = 0.25 * (
            field.values[0, 2, 4] + field.values[0, 3, 4]
            + field.values[0, 2, 5] + field.values[0, 3, 5]
        )
        assert float(pol.decide(x, q, 0.0, CTX)) == pytest.approx(expected, rel=1e-12)

    def test_nearest_time_slice(self):
        field = ramp_field()
        pol = MeanFieldPolicy(field)
        lat = field.lattice
        x, q = lat.x_centers[1], lat.q_centers[1]
        early = float(pol.decide(x, q, 0.01, CTX))
        late = float(pol.decide(x, q, 0.99, CTX))
        assert late - early == pytest.approx(0.2, rel=1e-9)

    def test_edge_clamp_within_one_cell(self):
        pol = MeanFieldPolicy(ramp_field())
        val = float(pol.decide(1.05, 0.5, 0.0, CTX))  # within one dx of the edge
        assert np.isfinite(val)

    def test_rejects_far_out_of_lattice(self):
        pol = MeanFieldPolicy(ramp_field())
        with pytest.raises(MfcacheError):
            pol.decide(1.5, 0.5, 0.0, CTX)
        with pytest.raises(MfcacheError):
            pol.decide(0.5, -0.5, 0.0, CTX)

    def test_deterministic(self):
        pol = MeanFieldPolicy(ramp_field())
        assert pol.decide(0.3, 0.3, 0.5, CTX) == pol.decide(0.3, 0.3, 0.5, CTX)


class TestFeasibilityClamp:
    @pytest.mark.parametrize("kind,seed", [("baseline", None), ("random", 3)])
    def test_constrained_context(self, kind, seed):
        ctx = DecisionContext(backhaul_limit=0.6, content_size=1.0,
                              storage_capacity=0.4, rate=100.0)
        pol = make_policy(kind, seed=seed)
        vals = np.asarray(pol.decide(np.linspace(0, 1, 100), np.zeros(100), 0.0, ctx))
        assert (vals <= min(0.4, 0.6) + 1e-12).all()

    def test_mean_field_clamped(self):
        field = ramp_field()
        field.values[:] = 5.0  # corrupt beyond any feasible fraction
        ctx = DecisionContext(backhaul_limit=1.0, content_size=1.0,
                              storage_capacity=1.0, rate=1.0)
        val = float(MeanFieldPolicy(field).decide(0.5, 0.5, 0.0, ctx))
        assert val == pytest.approx(ctx.max_fraction)

    def test_make_policy_requires_field(self):
        with pytest.raises(MfcacheError):
            make_policy("mf")


class TestObservePopularity:
    def test_perfect_information_identity(self):
        x = np.array([0.0, 0.2, 0.9])
        out = observe_popularity(x, IpiModel(), np.random.default_rng(0))
        assert np.array_equal(out, x)

    def test_bias_shift(self):
        rng = np.random.default_rng(1)
        out = observe_popularity(np.full(4000, 0.3), IpiModel(bias=0.2, sd=0.001), rng)
        assert out.mean() == pytest.approx(0.5, abs=0.005)

    def test_clips_high(self):
        out = observe_popularity(np.array([0.95]), IpiModel(bias=0.2, sd=0.0),
                                 np.random.default_rng(0))
        assert out[0] == 1.0

    def test_clips_low_to_floor(self):
        out = observe_popularity(np.array([0.05]), IpiModel(bias=-0.5, sd=0.0),
                                 np.random.default_rng(0))
        assert out[0] == pytest.approx(1e-3)
