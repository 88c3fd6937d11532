import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kstest, ks_2samp, levy

from fractional_kinetics.errors import ParameterError
from fractional_kinetics.streams import (
    RngStream,
    kanter_stable,
    pareto_quantile,
    sample_onesided_stable,
    sample_pareto_waiting,
)


class TestRngStream:
    def test_replay_reproduces_sequence(self):
        a = RngStream(123, 7).uniform(100)
        b = RngStream(123, 7).uniform(100)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(123, 0).uniform(100)
        b = RngStream(123, 1).uniform(100)
        c = RngStream(124, 0).uniform(100)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_counter_tracks_draws(self):
        s = RngStream(5, 0)
        s.uniform()
        s.uniform(10)
        assert s.counter == 11


class TestParetoWaiting:
    def test_quantile_closed_form(self):
        # U = 0.25, beta = 0.5: r = 0.25**(-2) = 16
        assert pareto_quantile(0.25, 0.5) == 16.0

    def test_minimum_support(self):
        r = sample_pareto_waiting(0.7, RngStream(1, 0), size=10000)
        assert np.all(r >= 1.0)

    def test_tail_law(self):
        # P(r > rho) = rho**(-beta), from integrating the density tail
        beta = 0.6
        n = 10**6
        r = sample_pareto_waiting(beta, RngStream(2, 0), size=n)
        for rho in (2.0, 4.0, 8.0):
            target = rho ** (-beta)
            emp = np.mean(r > rho)
            se = np.sqrt(target * (1 - target) / n)
            assert abs(emp - target) <= 3 * se

    def test_infinite_mean_running_means_grow(self):
        r = sample_pareto_waiting(0.5, RngStream(3, 0), size=10**6)
        means = [r[:n].mean() for n in (10**3, 10**4, 10**5, 10**6)]
        assert all(a < b for a, b in zip(means, means[1:]))

    def test_rejects_bad_order(self):
        with pytest.raises(ParameterError):
            sample_pareto_waiting(1.0, RngStream(0, 0))
        with pytest.raises(ParameterError):
            sample_pareto_waiting(0.0, RngStream(0, 0))


class TestOnesidedStable:
    def test_laplace_transform(self):
        # E exp(-lam X) = exp(-lam**beta)
        n = 2 * 10**5
        for beta in (0.4, 0.5, 0.7):
            x = sample_onesided_stable(beta, RngStream(4, int(beta * 10)), size=n)
            for lam in (0.5, 1.0, 2.0):
                vals = np.exp(-lam * x)
                target = np.exp(-(lam**beta))
                se = vals.std(ddof=1) / np.sqrt(n)
                assert abs(vals.mean() - target) <= 3 * se

    def test_half_order_closed_form_law(self):
        # Laplace transform exp(-sqrt(lam)) identifies the law 1/(2 Z^2),
        # i.e. the Levy distribution with scale 1/2 (verified against both
        # the analytic CDF and an independent normal-based sampler)
        n = 10**5
        x = sample_onesided_stable(0.5, RngStream(5, 0), size=n)
        assert kstest(x, levy(scale=0.5).cdf).statistic < 0.005
        z = RngStream(5, 1).normal(n)
        oracle = 1.0 / (2.0 * z**2)
        assert ks_2samp(x, oracle).statistic < 0.01

    def test_positivity(self):
        x = sample_onesided_stable(0.3, RngStream(6, 0), size=10**5)
        assert np.all(x > 0)

    def test_kanter_transform_is_deterministic(self):
        u, w = 0.37, 1.21
        a = kanter_stable(u, w, 0.5)
        b = kanter_stable(u, w, 0.5)
        assert a == b > 0

    @settings(max_examples=25, deadline=None)
    @given(beta=st.floats(0.05, 0.95), seed=st.integers(0, 2**31))
    def test_support_property(self, beta, seed):
        x = sample_onesided_stable(beta, RngStream(seed, 0), size=256)
        assert np.all(x > 0) and np.all(np.isfinite(x))
