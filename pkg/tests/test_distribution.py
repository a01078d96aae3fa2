import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from rfgml.distribution import (
    ScoreDistribution,
    betainc,
    confidence_interval,
    density,
    nll,
    quantile,
    sample,
    std_of,
    t_cdf,
    t_quantile,
)

mp.mp.dps = 40


def _oracle_nll(mu, a, s):
    # -log of the logistic density sech^2(z) / 4a, in high precision
    z = (mp.mpf(s) - mp.mpf(mu)) / (2 * mp.mpf(a))
    return float(mp.log(4 * mp.mpf(a)) - 2 * mp.log(mp.sech(z)))


def D(mu, a):
    return ScoreDistribution(mu, math.log(a))


class TestNll:
    def test_at_mode_unit_scale(self):
        assert nll(D(60, 0.25), 60) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("a", [1e-3, 0.7, 10.0, 1e3])
    def test_at_mode_is_log4a(self, a):
        assert nll(D(12.0, a), 12.0) == pytest.approx(math.log(4 * a), abs=1e-12)

    def test_worked_value(self):
        # log(40) - 2 ln sech(1)
        assert nll(D(50, 10), 70) == pytest.approx(4.556441115079990, abs=1e-12)
        assert nll(D(50, 10), 70) == pytest.approx(_oracle_nll(50, 10, 70), abs=1e-12)

    def test_far_tail_finite(self):
        v = nll(D(0, 1e-3), 1e4)
        assert math.isfinite(v) and v == pytest.approx(_oracle_nll(0, 1e-3, 1e4), rel=1e-12)

    def test_random_vs_oracle(self, rng):
        for _ in range(300):
            a = 10 ** rng.uniform(-3, 3)
            mu = rng.uniform(-50, 150)
            s = mu + rng.uniform(-1e4, 1e4)
            assert abs(nll(D(mu, a), s) - _oracle_nll(mu, a, s)) <= 1e-9 * max(1.0, abs(_oracle_nll(mu, a, s)))

    def test_density_integrates_to_one(self):
        d = D(37.0, 6.0)
        val, _ = integrate.quad(lambda s: density(d, s), 37 - 360, 37 + 360, limit=400, epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_matches_scipy_logistic(self, rng):
        s = rng.uniform(-100, 200, 50)
        np.testing.assert_allclose(nll(D(40, 7), s), -stats.logistic.logpdf(s, loc=40, scale=7), atol=1e-10)

    @settings(max_examples=60)
    @given(st.floats(-100, 200), st.floats(-5, 5), st.floats(0, 500))
    def test_symmetric(self, mu, log_a, d):
        dist = ScoreDistribution(mu, log_a)
        assert nll(dist, mu + d) == pytest.approx(nll(dist, mu - d), abs=1e-12 * max(1, d))

    @settings(max_examples=60)
    @given(st.floats(-2, 4), st.floats(0, 200), st.floats(1e-3, 50))
    def test_monotone_in_distance(self, log_a, d, step):
        dist = ScoreDistribution(50.0, log_a)
        assert nll(dist, 50.0 + d + step) > nll(dist, 50.0 + d)


class TestSampling:
    def test_moments(self):
        x = sample(D(60, 5), 100_000, np.random.default_rng(0))
        assert abs(x.mean() - 60) <= 0.15
        assert abs(x.std() / (math.pi * 5 / math.sqrt(3)) - 1) < 0.01

    def test_quantiles(self):
        d = D(60, 5)
        x = sample(d, 100_000, np.random.default_rng(3))
        for p in (0.1, 0.25, 0.5, 0.75, 0.9):
            q = quantile(d, p)
            assert abs(np.quantile(x, p) - q) <= 0.02 * abs(q)

    def test_median_at_mu(self):
        assert quantile(D(42.0, 3.0), 0.5) == 42.0

    def test_deterministic(self):
        a = sample(D(1, 2), 50, np.random.default_rng(9))
        b = sample(D(1, 2), 50, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_zero_rejected(self, rng):
        with pytest.raises(ValueError):
            sample(D(0, 1), 0, rng)


class TestStd:
    def test_unit(self):
        assert std_of(D(0, math.sqrt(3) / math.pi)) == pytest.approx(1.0, abs=1e-12)

    def test_a10(self):
        assert std_of(D(0, 10)) == pytest.approx(18.1380, abs=1e-4)
        assert D(0, 10).std == pytest.approx(math.pi * 10 / math.sqrt(3), abs=1e-12)

    def test_linear(self):
        assert std_of(D(0, 6)) == pytest.approx(2 * std_of(D(0, 3)), rel=1e-15)


class TestStudentT:
    def test_table_value(self):
        assert t_quantile(0.975, 10) == pytest.approx(2.228, abs=1e-3)

    def test_symmetry(self):
        assert t_quantile(0.5, 7) == 0.0
        assert t_quantile(0.1, 5) == pytest.approx(-t_quantile(0.9, 5), abs=1e-12)

    def test_normal_limit(self):
        assert t_quantile(0.975, 1e6) == pytest.approx(1.960, abs=1e-3)

    @pytest.mark.parametrize("df", [1, 2, 3, 5, 10, 30, 100, 200])
    @pytest.mark.parametrize("p", [0.6, 0.9, 0.95, 0.975, 0.995])
    def test_vs_scipy(self, p, df):
        assert t_quantile(p, df) == pytest.approx(stats.t.ppf(p, df), abs=1e-6)

    def test_cdf_vs_scipy(self):
        for t in (-3.0, -0.4, 0.0, 1.2, 5.0):
            assert t_cdf(t, 4) == pytest.approx(stats.t.cdf(t, 4), abs=1e-12)

    def test_betainc_vs_scipy(self):
        from scipy.special import betainc as sb

        for a, b, x in [(0.5, 0.5, 0.3), (2, 5, 0.9), (10, 0.5, 0.99)]:
            assert betainc(a, b, x) == pytest.approx(sb(a, b, x), abs=1e-13)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_bad_p(self, p):
        with pytest.raises(ValueError):
            t_quantile(p, 3)


class TestConfidenceInterval:
    def test_worked(self):
        lo, hi = confidence_interval(D(80, math.sqrt(3) / math.pi), 11, 0.95)
        assert hi - 80 == pytest.approx(2.228 / math.sqrt(11), abs=1e-3)
        assert 80 - lo == pytest.approx(hi - 80, abs=1e-12)

    def test_zero_level(self):
        lo, hi = confidence_interval(D(55, 4), 8, 1e-12)
        assert lo == pytest.approx(55, abs=1e-9) and hi == pytest.approx(55, abs=1e-9)

    def test_width_scaling(self):
        d = D(50, 5)
        w = {}
        for n in (4, 16, 64):
            lo, hi = confidence_interval(d, n)
            w[n] = (hi - lo) / (2 * t_quantile(0.975, n - 1))
        assert w[4] / w[16] == pytest.approx(2.0, rel=1e-12)
        assert w[16] / w[64] == pytest.approx(2.0, rel=1e-12)

    def test_too_few(self):
        with pytest.raises(ValueError):
            confidence_interval(D(0, 1), 1)
