import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cipca import (
    RankDeficiencyError,
    ValidationError,
    alpha_regression,
    default_nw_lags,
    factor_stats,
    max_drawdown,
    ordered_selection,
    tangency_backtest,
    tangency_weights,
)

import oracles


def series_with_moments(mean, sd, T=120, seed=0):
    """A series whose sample mean and (ddof=1) SD are exactly as requested."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(T)
    z = (z - z.mean()) / z.std(ddof=1)
    return mean + sd * z


class TestFactorStats:
    def test_paper_anchor_sharpe(self):
        # monthly mean 0.24%, SD 1.14% -> annualized Sharpe 0.73
        r = series_with_moments(0.0024, 0.0114)
        st_ = factor_stats(r)
        assert st_.mean == pytest.approx(0.24, abs=1e-10)
        assert st_.sd == pytest.approx(1.14, abs=1e-10)
        assert st_.sharpe == pytest.approx(0.73, abs=0.005)

    def test_positive_series_has_zero_mdd(self):
        assert max_drawdown(np.full(24, 0.01)) == 0.0
        r = np.tile([0.01, 0.02], 12)  # strictly positive, nonconstant
        assert factor_stats(r).mdd == 0.0

    def test_five_months_down_one_percent(self):
        assert max_drawdown(np.full(5, -0.01)) == pytest.approx(1 - 0.99**5,
                                                                abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_mdd_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(0, 0.05, size=24)
        got = factor_stats(r).mdd
        assert got == pytest.approx(100 * oracles.max_drawdown(r), abs=1e-10)

    def test_mdd_unchanged_by_new_peak(self, rng):
        r = rng.normal(0, 0.03, size=36)
        base = factor_stats(r).mdd
        extended = np.append(r, 5.0)  # final month sets a fresh wealth peak
        assert factor_stats(extended).mdd == pytest.approx(base, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(ValidationError):
            factor_stats(np.zeros(10))

    def test_annualization_factor(self):
        r = series_with_moments(0.01, 0.02)
        st_ = factor_stats(r)
        assert st_.sharpe == pytest.approx((0.01 / 0.02) * math.sqrt(12), abs=1e-12)


class TestTangency:
    def test_symmetric_factors_equal_weights(self, rng):
        # two uncorrelated factors with identical sample moments
        a = series_with_moments(0.01, 0.02, T=90, seed=1)
        b = a[::-1].copy()  # same moments, permuted path
        F = np.column_stack([a, b])
        mu = F.mean(axis=0)
        Sigma = np.cov(F, rowvar=False, ddof=0)
        Sigma[0, 1] = Sigma[1, 0] = 0.0
        w = tangency_weights(mu, Sigma)
        assert w[0] == pytest.approx(w[1], rel=1e-10)

    def test_diagonal_direction(self):
        w = tangency_weights(np.array([2.0, 1.0]), np.eye(2))
        np.testing.assert_allclose(w, [2.0, 1.0], atol=1e-12)

    def test_single_factor_insample_sharpe(self):
        f = series_with_moments(-0.004, 0.02, T=120, seed=3)
        res = tangency_backtest(f[:, None], burn_in=119)
        w = res.weights_path[0][0]
        assert w < 0  # negative premium flips the position
        hist = f[:119] * w
        assert hist.mean() / hist.std(ddof=0) == pytest.approx(
            abs(f[:119].mean() / f[:119].std(ddof=0)), abs=1e-12)

    def test_ex_ante_vol_is_one_percent(self, rng):
        F = rng.standard_normal((100, 3)) * 0.02 + 0.005
        res = tangency_backtest(F, burn_in=20)
        for s, w in enumerate(res.weights_path, start=20):
            assert abs((F[:s] @ w).std() - 0.01) < 1e-10

    def test_direction_matches_bruteforce_sharpe_maximizer(self, rng):
        for seed in range(3):
            g = np.random.default_rng(seed)
            A = g.standard_normal((2, 2))
            F = g.standard_normal((240, 2)) @ A * 0.02 + g.uniform(0.002, 0.01, 2)
            mu = F.mean(axis=0)
            Sigma = np.cov(F, rowvar=False, ddof=0)
            w = tangency_weights(mu, Sigma)
            w = w / np.linalg.norm(w)
            w_star = oracles.best_sharpe_direction(F)
            if w @ w_star < 0:
                w_star = -w_star
            np.testing.assert_allclose(w, w_star, atol=1e-6)

    def test_insample_dominance(self, rng):
        F = rng.standard_normal((150, 3)) * [0.02, 0.03, 0.025] + [0.006, 0.003, 0.004]
        mu = F.mean(axis=0)
        Sigma = np.cov(F, rowvar=False, ddof=0)
        w = tangency_weights(mu, Sigma)
        port = F @ w
        tan_sharpe = port.mean() / port.std(ddof=0)
        for j in range(3):
            fj = F[:, j]
            assert tan_sharpe >= abs(fj.mean() / fj.std(ddof=0)) - 1e-12

    def test_scale_invariance_of_direction(self, rng):
        # doubling returns leaves the direction unchanged and halves the
        # weight vector, so the realized 1%-vol series is identical
        F = rng.standard_normal((80, 2)) * 0.02 + 0.004
        r1 = tangency_backtest(F, burn_in=10)
        r2 = tangency_backtest(2 * F, burn_in=10)
        for w1, w2 in zip(r1.weights_path, r2.weights_path):
            np.testing.assert_allclose(w1 / np.linalg.norm(w1),
                                       w2 / np.linalg.norm(w2), atol=1e-10)
            np.testing.assert_allclose(w2, w1 / 2, rtol=1e-8)
        np.testing.assert_allclose(r2.returns, r1.returns, rtol=1e-8)

    def test_singular_covariance_names_month(self):
        F = np.column_stack([np.ones(30) * 0.01, np.ones(30) * 0.01])
        F[:, 1] = F[:, 0]  # perfectly collinear
        with pytest.raises((RankDeficiencyError, ValidationError)):
            tangency_backtest(F, burn_in=5)

    def test_burn_in_checks(self, rng):
        F = rng.standard_normal((20, 3))
        with pytest.raises(ValidationError):
            tangency_backtest(F, burn_in=4)   # < J+2
        with pytest.raises(ValidationError):
            tangency_backtest(F, burn_in=20)  # no months left

    def test_factor_return_series_input_carries_dates(self, rng):
        from cipca.factor_model import FactorReturnSeries

        F = rng.standard_normal((30, 2)) * 0.02 + 0.004
        series = FactorReturnSeries(dates=list(range(200001, 200031)), F=F)
        res = tangency_backtest(series, burn_in=10)
        assert res.dates == list(range(200011, 200031))
        res_arr = tangency_backtest(F, burn_in=10)
        np.testing.assert_array_equal(res.returns, res_arr.returns)


class TestOrderedSelection:
    def make_factors(self, sharpes, T=240, seed=0):
        rng = np.random.default_rng(seed)
        cols = []
        for s in sharpes:
            monthly = s / math.sqrt(12)
            cols.append(series_with_moments(monthly * 0.02, 0.02, T=T,
                                            seed=int(1000 * abs(s)) + 7))
        return np.column_stack(cols)

    def test_market_first_then_descending_sharpe(self):
        F = self.make_factors([0.4, 0.9, 0.5, 0.7])
        sel = ordered_selection(F, market_index=0)
        assert sel.order == [0, 1, 3, 2]
        assert sel.models[1] == [0, 1]

    def test_ties_break_by_column_index(self):
        F = self.make_factors([0.4, 0.6, 0.6, 0.6])
        sel = ordered_selection(F, market_index=0)
        assert sel.order == [0, 1, 2, 3]

    def test_single_factor_model_is_market_only(self):
        F = self.make_factors([0.4, 0.9])
        sel = ordered_selection(F, market_index=0)
        assert sel.models[0] == [0]

    def test_market_not_first_column(self):
        F = self.make_factors([0.9, 0.4, 0.7])
        sel = ordered_selection(F, market_index=1)
        assert sel.order[0] == 1
        assert sel.order[1:] == [0, 2]


class TestAlphaRegression:
    def test_identity_regression(self, rng):
        y = rng.standard_normal(100) * 0.02 + 0.003
        rep = alpha_regression(y, y[:, None], nw_lags=3)
        assert rep.alpha == pytest.approx(0.0, abs=1e-10)
        assert rep.betas[0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_alpha_recovery(self):
        rng = np.random.default_rng(42)
        T = 5000
        X = rng.standard_normal((T, 2)) * 0.02
        y = 0.002 + rng.standard_normal(T) * 0.01
        rep = alpha_regression(y, X)
        se = 0.01 / math.sqrt(T) * 100
        assert abs(rep.alpha - 0.2) < 3 * se

    def test_zero_lags_equals_white_se(self, rng):
        y = rng.standard_normal(200) * 0.02 + 0.001
        X = rng.standard_normal((200, 2)) * 0.02
        rep = alpha_regression(y, X, nw_lags=0)
        beta, se0 = oracles.newey_west_alpha_se(y, X, lags=0)
        assert rep.tstat_alpha == pytest.approx(beta[0] / se0, rel=1e-10)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 8))
    def test_matches_double_loop_oracle(self, seed, lags):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal(60) * 0.02
        X = rng.standard_normal((60, 2)) * 0.02
        rep = alpha_regression(y, X, nw_lags=lags)
        beta, se = oracles.newey_west_alpha_se(y, X, lags)
        assert rep.alpha == pytest.approx(100 * beta[0], rel=1e-10)
        assert rep.tstat_alpha == pytest.approx(beta[0] / se, rel=1e-8)

    def test_hac_covariance_psd(self, rng):
        # Bartlett weighting keeps the meat matrix PSD for every lag choice
        y = rng.standard_normal(80) * 0.02
        X = rng.standard_normal((80, 3)) * 0.02
        Xd = np.column_stack([np.ones(80), X])
        beta = np.linalg.solve(Xd.T @ Xd, Xd.T @ y)
        u = y - Xd @ beta
        Xu = Xd * u[:, None]
        for lags in (0, 1, 5, 20, 79):
            S = Xu.T @ Xu
            for lag in range(1, lags + 1):
                w = 1 - lag / (lags + 1)
                G = Xu[lag:].T @ Xu[:-lag]
                S += w * (G + G.T)
            eig = np.linalg.eigvalsh((S + S.T) / 2)
            assert eig.min() > -1e-12 * max(1.0, eig.max())

    def test_collinear_benchmarks_rejected(self, rng):
        X = rng.standard_normal((50, 2))
        X = np.column_stack([X, X[:, 0] * 2.0])
        y = rng.standard_normal(50)
        with pytest.raises(ValidationError, match="collinear"):
            alpha_regression(y, X)

    def test_default_lag_rule(self):
        assert default_nw_lags(100) == 4
        assert default_nw_lags(264) == math.floor(4 * (264 / 100) ** (2 / 9))

    def test_length_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            alpha_regression(rng.standard_normal(10),
                             rng.standard_normal((12, 2)))
