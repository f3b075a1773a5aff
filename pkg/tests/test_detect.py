import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from authpeer.detect import (
    ALERTS_HEADER,
    AnomalyReport,
    HpdiInterval,
    alert_rate,
    cell_thresholds,
    detect,
    flag_anomalies,
    hpdi,
    hpdi_columns,
    posterior_predictive,
)
from authpeer.inference import PosteriorSamples
from authpeer.models import ModelSpec, Observations, cell_positions


def brute_hpdi(draws, alpha):
    """Every contiguous window of the sorted draws holding enough of them; narrowest, then lowest."""
    x = sorted(draws)
    n = len(x)
    need = math.ceil(round((1 - alpha) * n, 9))
    best = None
    for i in range(n):
        for j in range(i, n):
            if j - i + 1 >= need:
                cand = (x[j] - x[i], x[i], x[j])
                if best is None or cand < best:
                    best = cand
                break
    return best[1], best[2]


def point_mass(spec, value):
    return PosteriorSamples(spec, np.full((50, spec.index.size), value))


class TestHpdi:
    def test_degenerate(self):
        iv = hpdi([7, 7], 0.01)
        assert (iv.lower, iv.upper, iv.mass) == (7, 7, 1.0)

    def test_fixture(self):
        iv = hpdi([0, 0, 1, 1, 1, 2, 2, 3, 4, 10], 0.2)
        assert (iv.lower, iv.upper) == (0, 3)
        assert iv.mass == pytest.approx(0.8)

    def test_ties_go_to_lowest(self):
        iv = hpdi([0, 1, 2, 3], 0.5)
        assert (iv.lower, iv.upper) == (0, 1)

    def test_float_window_guard(self):
        # 0.99 * 100 is 98.99999... in floating point; the window must be 99 draws
        assert hpdi(np.arange(100), 0.01).upper == 98

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
    def test_alpha_domain(self, alpha):
        with pytest.raises(ValueError):
            hpdi([1, 2], alpha)

    def test_empty(self):
        with pytest.raises(ValueError):
            hpdi([], 0.1)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_exhaustive_search(self, seed):
        rng = np.random.default_rng(seed)
        draws = rng.poisson(rng.uniform(0.5, 8), rng.integers(1, 40)).tolist()
        alpha = float(rng.choice([0.01, 0.05, 0.1, 0.2, 0.5]))
        iv = hpdi(draws, alpha)
        assert (iv.lower, iv.upper) == brute_hpdi(draws, alpha)

    @given(st.lists(st.integers(0, 50), min_size=1, max_size=60), st.sampled_from([0.01, 0.05, 0.1, 0.3]))
    def test_mass_at_least_nominal(self, draws, alpha):
        iv = hpdi(draws, alpha)
        assert iv.mass >= 1 - alpha - 1e-12
        assert iv.lower <= iv.upper

    @given(st.lists(st.integers(0, 50), min_size=2, max_size=60))
    def test_smaller_alpha_never_narrower(self, draws):
        a, b = hpdi(draws, 0.2), hpdi(draws, 0.05)
        assert b.upper - b.lower >= a.upper - a.lower

    def test_columns_match_scalar(self, rng):
        draws = rng.poisson(4, size=(200, 6))
        lo, hi = hpdi_columns(draws, 0.05)
        for j in range(6):
            iv = hpdi(draws[:, j], 0.05)
            assert (lo[j], hi[j]) == (iv.lower, iv.upper)

    def test_poisson_coverage(self):
        rng = np.random.default_rng(11)
        iv = hpdi(rng.poisson(5, 4000), 0.01)
        fresh = rng.poisson(5, 10_000)
        outside = np.mean((fresh < iv.lower) | (fresh > iv.upper))
        assert outside <= 0.02


class TestFlags:
    def setup_method(self):
        self.spec = ModelSpec("M3", 2)
        self.test = Observations.from_arrays([3, 4, 9, 0], [0, 1, 2, 3], [1, 1, 1, 1], [0, 0, 1, 1], [1, 2, 1, 1], user=list("abcd"), bucket=["t0", "t1", "t2", "t3"])
        self.thr = {(0, -1): HpdiInterval(0, 3, 0.01, 0.99), (1, -1): HpdiInterval(1, 8, 0.01, 0.99)}

    def test_strict_exceedance(self):
        rep = flag_anomalies(self.test, self.thr, self.spec, "hr")
        assert [r.flagged for r in rep.rows] == [False, True, True, False]
        assert rep.flagged_keys == {("b", "t1", "ntlm"), ("c", "t2", "kerberos")}
        assert alert_rate(rep) == 0.5

    def test_alert_rate_exclusion(self):
        rep = flag_anomalies(self.test, self.thr, self.spec)
        assert alert_rate(rep, exclude={("b", "t1", "ntlm")}) == pytest.approx(1 / 3)

    def test_empty_report(self):
        with pytest.raises(ValueError):
            alert_rate(AnomalyReport())

    def test_missing_cell_raises(self):
        with pytest.raises(KeyError, match="no threshold"):
            flag_anomalies(self.test, {(0, -1): self.thr[(0, -1)]}, self.spec)

    def test_raising_threshold_never_adds_flags(self):
        looser = {c: HpdiInterval(iv.lower, iv.upper + 2, 0.01, 1.0) for c, iv in self.thr.items()}
        a = flag_anomalies(self.test, self.thr, self.spec).flagged_keys
        b = flag_anomalies(self.test, looser, self.spec).flagged_keys
        assert b <= a

    def test_csv(self):
        buf = io.StringIO()
        flag_anomalies(self.test, self.thr, self.spec, "hr").to_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == ",".join(ALERTS_HEADER)
        assert lines[2] == "b,t1,ntlm,0,4,3,1,M3,hr"


class TestPredictive:
    def test_point_mass_rate(self):
        spec = ModelSpec("M1", 1)
        draws = posterior_predictive(point_mass(spec, math.log(6.0)), spec, (0, 1, 0, 1), n_draws=20_000)
        assert draws.mean() == pytest.approx(6.0, rel=0.03)
        assert draws.var() == pytest.approx(6.0, rel=0.06)

    def test_invalid_cell(self):
        spec = ModelSpec("M4", 2)
        with pytest.raises(ValueError):
            posterior_predictive(point_mass(spec, 0.0), spec, (0, 1, 5, 1))

    def test_detect_flags_spike(self, rng):
        spec = ModelSpec("M5", 2)
        test = Observations.from_arrays([2, 40, 1], [0, 0, 5], [1, 2, 3], [0, 1, 1], [1, 2, 2], user=["u", "v", "w"], bucket=[0, 1, 2])
        rep = detect(point_mass(spec, 0.5 * math.log(2.0)), test, alpha=0.01, n_draws=2000)
        assert [r.user for r in rep.rows if r.flagged] == ["v"]

    def test_thresholds_deterministic(self):
        spec = ModelSpec("M2", 1)
        samples = PosteriorSamples(spec, np.random.default_rng(0).normal(1, 0.1, (100, 168)))
        cells = [(3, -1), (10, -1)]
        assert cell_thresholds(samples, cells, seed=5) == cell_thresholds(samples, cells, seed=5)

    def test_cells_share_thresholds(self):
        spec = ModelSpec("M4", 1)
        test = Observations.from_arrays([1, 2], [4, 4], [2, 2], [0, 0], [1, 2])
        rate, method = cell_positions(spec, test)
        assert len(set(zip(rate.tolist(), method.tolist()))) == 1
