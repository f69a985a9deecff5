"""Factor statistics, tangency backtests, ordered selection, alpha regressions.

All return series are monthly decimals; reported means, standard deviations,
drawdowns and alphas are in percent per month, and Sharpe ratios are
annualized by sqrt(12).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import RankDeficiencyError, ValidationError
from .factor_model import FactorReturnSeries

logger = logging.getLogger(__name__)

TARGET_VOL = 0.01  # ex-ante monthly volatility of the tangency portfolio
ANNUALIZE = math.sqrt(12.0)


@dataclass
class FactorStats:
    mean: float     # % per month
    sd: float       # % per month
    sharpe: float   # annualized
    mdd: float      # % maximum drawdown


@dataclass
class TangencyResult:
    dates: list[int] | None
    weights_path: list[np.ndarray]
    returns: np.ndarray
    sharpe: float
    scaling_path: list[float]


@dataclass
class AlphaReport:
    alpha: float            # % per month
    betas: np.ndarray
    tstat_alpha: float
    nw_lags: int


def max_drawdown(series: np.ndarray) -> float:
    """Largest peak-to-trough decline of compounded wealth, as a fraction."""
    r = np.asarray(series, dtype=float)
    wealth = np.concatenate(([1.0], np.cumprod(1.0 + r)))
    peaks = np.maximum.accumulate(wealth)
    return float(np.max(1.0 - wealth / peaks))


def factor_stats(series: np.ndarray) -> FactorStats:
    """Sample mean/SD, annualized Sharpe and compounded maximum drawdown."""
    r = np.asarray(series, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ValidationError("need a 1-d series of length >= 2")
    mean = r.mean()
    sd = r.std(ddof=1)
    if sd == 0:
        raise ValidationError("zero variance: Sharpe ratio undefined")
    return FactorStats(mean=100 * mean, sd=100 * sd,
                       sharpe=float(mean / sd * ANNUALIZE),
                       mdd=100 * max_drawdown(r))


def tangency_weights(mu: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """Unscaled tangency direction Sigma^-1 mu."""
    try:
        return np.linalg.solve(Sigma, mu)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("singular factor covariance matrix") from None


def tangency_backtest(F: np.ndarray | FactorReturnSeries, burn_in: int,
                      *, ridge: bool = False) -> TangencyResult:
    """Expanding-window tangency portfolio scaled to 1% ex-ante volatility.

    At each month s >= ``burn_in`` the mean and (1/T-normalized) covariance
    of rows [0, s) give weights c * Sigma^-1 mu, with c set so the weighted
    historical return series has a 1% standard deviation; the weights are
    then applied to row s.

    Raises
    ------
    RankDeficiencyError
        Singular covariance at some rebalance (naming the month) unless
        ``ridge`` bumps the diagonal by 1e-10 * trace.
    """
    dates = None
    if isinstance(F, FactorReturnSeries):
        dates = F.dates
        F = F.F
    F = np.atleast_2d(np.asarray(F, dtype=float))
    T, J = F.shape
    if burn_in < J + 2:
        raise ValidationError(f"burn_in must be >= J+2 = {J + 2}")
    if T <= burn_in:
        raise ValidationError("series shorter than burn-in")
    weights_path, scaling_path, rets = [], [], []
    for s in range(burn_in, T):
        hist = F[:s]
        mu = hist.mean(axis=0)
        Sigma = np.cov(hist, rowvar=False, ddof=0).reshape(J, J)
        if ridge:
            Sigma = Sigma + 1e-10 * np.trace(Sigma) * np.eye(J)
            logger.debug("tangency ridge applied at rebalance %d", s)
        try:
            direction = np.linalg.solve(Sigma, mu)
        except np.linalg.LinAlgError:
            month = dates[s] if dates is not None else s
            raise RankDeficiencyError(
                f"singular factor covariance at month {month}") from None
        hist_vol = (hist @ direction).std()
        if hist_vol == 0:
            month = dates[s] if dates is not None else s
            raise RankDeficiencyError(
                f"degenerate tangency direction at month {month}")
        c = TARGET_VOL / hist_vol
        w = c * direction
        weights_path.append(w)
        scaling_path.append(float(c))
        rets.append(float(w @ F[s]))
    rets = np.array(rets)
    sharpe = (factor_stats(rets).sharpe
              if len(rets) >= 2 and rets.std(ddof=1) > 0 else 0.0)
    return TangencyResult(dates=list(dates[burn_in:]) if dates is not None else None,
                          weights_path=weights_path, returns=rets,
                          sharpe=sharpe, scaling_path=scaling_path)


@dataclass
class OrderedSelection:
    order: list[int]            # market first, then descending training Sharpe
    models: list[list[int]]     # models[j-1] = market + top j-1 factors
    sharpes: np.ndarray         # training Sharpe per factor column


def ordered_selection(F_train: np.ndarray, market_index: int) -> OrderedSelection:
    """Nest factor models by training Sharpe with the market as baseline."""
    F_train = np.atleast_2d(np.asarray(F_train, dtype=float))
    T, J = F_train.shape
    if not 0 <= market_index < J:
        raise ValidationError(f"market index {market_index} out of range")
    sd = F_train.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ValidationError("zero-variance factor column")
    sharpes = F_train.mean(axis=0) / sd * ANNUALIZE
    rest = [j for j in range(J) if j != market_index]
    rest.sort(key=lambda j: (-sharpes[j], j))
    order = [market_index] + rest
    models = [order[:j + 1] for j in range(J)]
    return OrderedSelection(order=order, models=models, sharpes=sharpes)


def default_nw_lags(T: int) -> int:
    """Standard automatic Newey-West lag choice floor(4 (T/100)^(2/9))."""
    return int(math.floor(4.0 * (T / 100.0) ** (2.0 / 9.0)))


def alpha_regression(y: np.ndarray, X_bench: np.ndarray,
                     nw_lags: int | None = None) -> AlphaReport:
    """OLS of a factor on benchmark factors with HAC (Bartlett) errors.

    The regression includes an intercept; its estimate (the alpha, reported
    in percent per month) is tested with a Newey-West t-statistic using
    ``nw_lags`` lags (automatic choice when omitted).

    Raises
    ------
    ValidationError
        Misaligned series or rank-deficient design (listing the collinear
        benchmark columns).
    """
    y = np.asarray(y, dtype=float)
    X_bench = np.atleast_2d(np.asarray(X_bench, dtype=float))
    if X_bench.shape[0] != len(y):
        raise ValidationError("regressand and benchmark lengths differ")
    T, p = X_bench.shape
    X = np.column_stack([np.ones(T), X_bench])
    if nw_lags is None:
        nw_lags = default_nw_lags(T)
    if nw_lags < 0:
        raise ValidationError("nw_lags must be nonnegative")

    rank = np.linalg.matrix_rank(X)
    if rank < p + 1:
        _, _, piv = scipy.linalg.qr(X, pivoting=True)
        dropped = sorted(int(c - 1) for c in piv[rank:] if c > 0)
        raise ValidationError(f"benchmark columns collinear: {dropped}")

    XtX = X.T @ X
    coef = np.linalg.solve(XtX, X.T @ y)
    u = y - X @ coef
    Xu = X * u[:, None]
    S = Xu.T @ Xu
    for lag in range(1, nw_lags + 1):
        w = 1.0 - lag / (nw_lags + 1.0)
        G = Xu[lag:].T @ Xu[:-lag]
        S += w * (G + G.T)
    XtX_inv = np.linalg.inv(XtX)
    V = XtX_inv @ S @ XtX_inv
    se_alpha = math.sqrt(max(V[0, 0], 0.0))
    if se_alpha > 0:
        tstat = coef[0] / se_alpha
    else:
        tstat = 0.0 if coef[0] == 0 else math.copysign(math.inf, coef[0])
    return AlphaReport(alpha=100 * coef[0], betas=coef[1:],
                       tstat_alpha=float(tstat), nw_lags=nw_lags)
