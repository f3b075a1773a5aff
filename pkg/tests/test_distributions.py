import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from authpeer.distributions import (
    RngStream,
    normal_cdf,
    normal_logpdf,
    normal_quantile,
    poisson_cdf,
    poisson_logpmf,
    sample_normal,
    sample_poisson,
)


class TestPoisson:
    @pytest.mark.parametrize("y, rate, expected", [(1, 1.0, -1.0), (0, 2.0, -2.0), (2, 3.0, -1.49592)])
    def test_logpmf_fixtures(self, y, rate, expected):
        assert poisson_logpmf(y, rate) == pytest.approx(expected, abs=1e-5)

    def test_logpmf_matches_direct_formula(self):
        assert poisson_logpmf(2, 3.0) == pytest.approx(-3 + 2 * math.log(3) - math.log(2), abs=1e-12)

    def test_logpmf_finite_for_huge_counts(self):
        assert np.isfinite(poisson_logpmf(10**6, 3.0))

    @pytest.mark.parametrize("rate", [0.0, -1.0])
    def test_nonpositive_rate_rejected(self, rate):
        with pytest.raises(ValueError):
            poisson_logpmf(1, rate)
        with pytest.raises(ValueError):
            poisson_cdf(1, rate)

    def test_cdf_fixtures(self):
        assert poisson_cdf(0, 1.0) == pytest.approx(math.exp(-1), abs=1e-6)
        assert poisson_cdf(10**4, 7.5) == pytest.approx(1.0, abs=1e-12)

    def test_cdf_telescopes_to_pmf(self):
        assert poisson_cdf(5, 3.0) - poisson_cdf(4, 3.0) == pytest.approx(math.exp(poisson_logpmf(5, 3.0)), abs=1e-12)

    def test_cdf_below_zero(self):
        assert poisson_cdf(-1, 2.0) == 0.0

    @given(st.floats(0.01, 20.0))
    def test_pmf_sums_to_one(self, rate):
        total = np.exp(poisson_logpmf(np.arange(201), rate)).sum()
        assert abs(total - 1.0) < 1e-10

    @given(st.floats(0.01, 50.0), st.integers(0, 100))
    def test_cdf_monotone(self, rate, y):
        assert poisson_cdf(y + 1, rate) >= poisson_cdf(y, rate)

    def test_sample_moments(self):
        x = sample_poisson(RngStream(3, 0).generator(), 4.0, size=100_000)
        se = math.sqrt(4.0 / x.size)
        assert abs(x.mean() - 4.0) < 3 * se
        # sd of the sample variance for Poisson(4) is about sqrt((mu + 2 mu^2) / n)
        assert abs(x.var(ddof=1) - 4.0) < 3 * math.sqrt((4 + 2 * 16) / x.size)


class TestNormal:
    def test_logpdf_prior_fixture(self):
        assert normal_logpdf(0.0, 0.0, 5.0) == pytest.approx(-2.52838, abs=1e-5)

    def test_quantile_fixtures(self):
        assert normal_quantile(0.5) == pytest.approx(0.0, abs=1e-12)
        assert normal_quantile(0.975) == pytest.approx(1.95996, abs=1e-5)

    def test_quantile_against_bisection_oracle(self):
        # invert an erf-based cdf by bisection
        def cdf(x):
            return 0.5 * (1 + math.erf(x / math.sqrt(2)))

        for p in (1e-6, 0.01, 0.3, 0.7, 0.999):
            lo, hi = -10.0, 10.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if cdf(mid) < p else (lo, mid)
            assert normal_quantile(p) == pytest.approx(lo, abs=1e-8)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
    def test_quantile_domain(self, p):
        with pytest.raises(ValueError):
            normal_quantile(p)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            normal_logpdf(0.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            sample_normal(np.random.default_rng(0), 0.0, -1.0)

    @given(st.floats(-6.0, 6.0))
    def test_quantile_inverts_cdf(self, x):
        assert abs(normal_quantile(normal_cdf(x)) - x) < 1e-6


class TestRngStream:
    def test_identical_streams(self):
        a = RngStream(7, 2).generator().standard_normal(5)
        b = RngStream(7, 2).generator().standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_distinct_streams(self):
        a = RngStream(7, 2).generator().standard_normal(5)
        b = RngStream(7, 3).generator().standard_normal(5)
        assert not np.array_equal(a, b)

    def test_child_is_deterministic_and_distinct(self):
        parent = RngStream(7, 2)
        assert parent.child(5) == parent.child(5)
        assert parent.child(5) != parent.child(6)
        assert parent.child(5) != parent
