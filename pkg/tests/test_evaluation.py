import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedvol.constraints import butterfly_b
from gatedvol.data_pipeline import run_pipeline
from gatedvol.errors import DomainError
from gatedvol.evaluation import (
    DayEval,
    EvalReport,
    evaluate_day,
    iv_mape,
    l1_distance,
    mape,
    predicted_prices,
    price_mape,
    quarterly,
    rn_density,
    surface_grid,
    write_density,
)
from gatedvol.ssvi import SsviParams, default_ssvi, synth_market
from gatedvol.surface_models import ConstantSurface, ModelDims, eval_multi

import oracles

positive = st.floats(0.01, 100.0)


class TestMape:
    def test_examples(self):
        assert mape([0.2, 0.4], [0.22, 0.38]) == pytest.approx(7.5, abs=1e-12)
        assert mape([0.3, 0.1], [0.3, 0.1]) == 0.0
        assert mape([1.0], [2.0]) == 100.0

    @given(st.lists(st.tuples(positive, positive), min_size=1, max_size=20), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, pairs, c):
        t, p = np.array(pairs).T
        assert mape(c * t, c * p) == pytest.approx(mape(t, p), rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("t, p", [([], []), ([1.0], [1.0, 2.0]), ([0.0], [1.0]), ([-1.0], [1.0])])
    def test_domain(self, t, p):
        with pytest.raises(DomainError):
            mape(t, p)


class TestPriceMape:
    def market_points(self):
        market = synth_market(default_ssvi(), 300, seed=5)
        points, _, _ = run_pipeline(market.quotes)
        return points

    def test_true_vol_reprices(self):
        points = self.market_points()
        assert price_mape(default_ssvi(), points) < 1e-6
        assert iv_mape(default_ssvi(), points) < 1e-6

    def test_vol_bias_shows_in_prices(self):
        points = self.market_points()

        class Biased:
            def value(self, m, tau):
                return default_ssvi().value(m, tau) * 1.01

        assert price_mape(Biased(), points) > iv_mape(Biased(), points) > 0

    def test_discount_override(self):
        points = self.market_points()[:5]
        base = predicted_prices(default_ssvi(), points, discount=1.0)
        np.testing.assert_allclose(predicted_prices(default_ssvi(), points, discount=0.5), 0.5 * base, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(DomainError):
            price_mape(ConstantSurface(0.2), [])


class TestQuarterly:
    def test_single_quarter(self):
        s = [(dt.date(2016, 1, 5), 1.0), (dt.date(2016, 2, 5), 2.0), (dt.date(2016, 3, 31), 6.0)]
        assert quarterly(s) == [("2016Q1", 3.0)]

    def test_two_quarters_sorted(self):
        s = [(dt.date(2016, 5, 1), 4.0), (dt.date(2016, 1, 1), 2.0), (dt.date(2015, 12, 31), 7.0)]
        assert quarterly(s) == [("2015Q4", 7.0), ("2016Q1", 2.0), ("2016Q2", 4.0)]

    def test_empty(self):
        with pytest.raises(DomainError):
            quarterly([])


class TestSurfaceGrid:
    def test_shape_and_order(self):
        g = surface_grid(ConstantSurface(0.2), (-1, 1), (0.1, 1), 2, 2)
        assert g.shape == (4, 3)
        assert g[:, 0].tolist() == [-1, 1, -1, 1] and g[:, 1].tolist() == [0.1, 0.1, 1, 1]
        assert np.all(g[:, 2] == 0.2)

    def test_multi_pointwise(self):
        p = oracles.perturbed_model("multi", ModelDims(2, 3, 2), 3)
        g = surface_grid(p, (-2, 1), (0.05, 2), 7, 5)
        for m, tau, v in g:
            assert v == pytest.approx(eval_multi(p, m, tau)[0], rel=1e-14)

    def test_domain(self):
        with pytest.raises(DomainError):
            surface_grid(ConstantSurface(0.2), (-1, 1), (0.1, 1), 1, 5)


class TestDensity:
    @pytest.mark.parametrize("vol, tau", [(0.2, 1.0), (0.35, 0.25), (0.15, 2.0)])
    def test_lognormal_oracle(self, vol, tau):
        m = np.linspace(-1.5, 1.0, 801)
        d = rn_density(ConstantSurface(vol), tau, m)
        ref = oracles.lognormal_logreturn_density(d.x, vol, tau)
        assert l1_distance(d.x, d.q, ref) < 1e-3
        assert abs(d.integral - 1.0) < 0.02

    def test_coarse_grid(self):
        with pytest.raises(DomainError):
            rn_density(ConstantSurface(0.2), 1.0, np.linspace(-1.5, 1.0, 101))

    @pytest.mark.parametrize("grid", [np.linspace(-1.0, 1.0, 401), np.linspace(-1.5, 0.5, 401), np.geomspace(1, 3.5, 401) - 2.5])
    def test_span_and_uniformity(self, grid):
        with pytest.raises(DomainError):
            rn_density(ConstantSurface(0.2), 1.0, grid)

    def test_clean_surface_nonnegative(self):
        p = default_ssvi()
        for tau in (11 / 365, 32 / 365, 109 / 365, 704 / 365):
            d = rn_density(p, tau, np.linspace(-1.5, 1.0, 801))
            assert np.mean(d.q >= 0) >= 0.99

    def test_negative_mass_matches_butterfly(self):
        p = SsviParams(((1.0, 0.04),), rho=-0.9, eta_pl=6.0, lambda_pl=0.45)
        d = rn_density(p, 1.0, np.linspace(-1.5, 1.0, 801))
        b = butterfly_b(p, d.x, np.ones_like(d.x))
        neg = d.q < 0
        assert neg.sum() > 0
        assert np.mean((b < 0)[neg]) >= 0.95

    def test_write(self, tmp_path):
        d = rn_density(ConstantSurface(0.2), 1.0, np.linspace(-1.5, 1.0, 201))
        write_density(d, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == "tau,x,density" and len(lines) == 200


class TestReport:
    def test_aggregation(self):
        days = [
            DayEval(dt.date(2016, 1, 4), 1.0, 2.0, 3.0, 4.0, 80, 20),
            DayEval(dt.date(2016, 4, 4), 3.0, 4.0, 5.0, 6.0, 40, 10),
        ]
        rep = EvalReport.from_days(days)
        assert (rep.iv_mape_train, rep.iv_mape_test, rep.price_mape_train, rep.price_mape_test) == (2, 3, 4, 5)
        assert rep.n_train == 120 and rep.n_test == 30
        assert rep.quarters["iv_mape_test"] == [("2016Q1", 2.0), ("2016Q2", 4.0)]
        doc = json.loads(rep.to_json())
        assert doc["days"][1]["date"] == "2016-04-04" and doc["violation"] is None

    def test_evaluate_day(self):
        market = synth_market(default_ssvi(), 200, seed=1)
        points, _, _ = run_pipeline(market.quotes)
        day = evaluate_day(default_ssvi(), points[:150], points[150:])
        assert day.date == dt.date(2016, 1, 11)
        assert day.iv_mape_train < 1e-6 and day.n_test == len(points) - 150

    def test_empty(self):
        with pytest.raises(DomainError):
            EvalReport.from_days([])
