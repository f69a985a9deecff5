"""Posterior-probability ranking of factor subsets.

Every nonempty subset of the J factors defines a candidate model. Factors in
the model have a free mean; the excluded factors are regressed on the
included ones with a zero intercept, which is what mean-variance efficiency
of the included set implies. Both blocks get conjugate normal-inverse-Wishart
priors estimated on the first ``tr`` fraction of the sample, so the evidence
on the remaining months is available in closed form and full enumeration of
the 2^J - 1 models stays cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, multigammaln

from .errors import EstimationError, ValidationError

MAX_FACTORS = 20
DEFAULT_TR = 0.1


@dataclass(frozen=True)
class ModelSpec:
    """A factor subset: the included factors and their complement."""

    included: tuple[int, ...]
    excluded: tuple[int, ...]

    @property
    def code(self) -> int:
        return sum(1 << j for j in self.included)

    @property
    def n_included(self) -> int:
        return len(self.included)


@dataclass
class PriorSpec:
    """Prior parameters estimated on the first sub-sample.

    ``alpha0``/``Sigma0``/``k`` parameterize the included-factor mean block;
    ``beta0``/``gram0``/``Sigma0_excl`` parameterize the excluded-factor
    regression block (empty arrays when no factor is excluded).
    """

    alpha0: np.ndarray
    Sigma0: np.ndarray
    k: float
    tr: float
    sh2max: float
    beta0: np.ndarray
    gram0: np.ndarray
    Sigma0_excl: np.ndarray


@dataclass
class ModelPosterior:
    spec: ModelSpec
    log_marginal: float
    posterior: float


def enumerate_models(J: int) -> list[ModelSpec]:
    """All nonempty factor subsets in binary-counting order."""
    if not 1 <= J <= MAX_FACTORS:
        raise ValidationError(f"need 1 <= J <= {MAX_FACTORS}, got {J}")
    specs = []
    for code in range(1, 2**J):
        included = tuple(j for j in range(J) if code >> j & 1)
        excluded = tuple(j for j in range(J) if not code >> j & 1)
        specs.append(ModelSpec(included=included, excluded=excluded))
    return specs


def _checked_cov(X: np.ndarray, what: str) -> np.ndarray:
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    sign, _ = np.linalg.slogdet(cov)
    if sign <= 0:
        raise EstimationError(f"{what} covariance is singular")
    return cov


def estimate_prior(F: np.ndarray, spec: ModelSpec, tr: float = DEFAULT_TR,
                   sh2max: float | None = None) -> PriorSpec:
    """Estimate prior parameters on the first floor(tr * T) months.

    ``alpha0`` and ``Sigma0`` are the mean and covariance of the included
    factors; the prior mean scaling is k = sh2max / |included| with sh2max
    defaulting to the squared Sharpe of the sub-sample tangency portfolio
    over all factors. The excluded block's prior regression coefficients,
    Gram matrix and covariance come from the same sub-sample.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    T = F.shape[0]
    if not 0.0 < tr < 1.0:
        raise ValidationError("tr must be in (0, 1)")
    n0 = int(math.floor(tr * T))
    if n0 < spec.n_included + 2:
        raise EstimationError(
            f"prior sub-sample of {n0} months too short for {spec.n_included} factors")
    head = F[:n0]
    if sh2max is None:
        sh2max = max_squared_sharpe(head)
    inc = head[:, list(spec.included)]
    alpha0 = inc.mean(axis=0)
    Sigma0 = _checked_cov(inc, "included-block prior")
    k = sh2max / spec.n_included
    if spec.excluded:
        exc = head[:, list(spec.excluded)]
        beta0, *_ = np.linalg.lstsq(inc, exc, rcond=None)
        gram0 = inc.T @ inc
        sign, _ = np.linalg.slogdet(gram0)
        if sign <= 0:
            raise EstimationError("included-block prior Gram matrix is singular")
        Sigma0_excl = _checked_cov(exc, "excluded-block prior")
    else:
        beta0 = np.zeros((spec.n_included, 0))
        gram0 = np.zeros((0, 0))
        Sigma0_excl = np.zeros((0, 0))
    return PriorSpec(alpha0=alpha0, Sigma0=Sigma0, k=float(k), tr=tr,
                     sh2max=float(sh2max), beta0=beta0, gram0=gram0,
                     Sigma0_excl=Sigma0_excl)


def max_squared_sharpe(F: np.ndarray) -> float:
    """Squared monthly Sharpe of the in-sample tangency over all columns."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    mu = F.mean(axis=0)
    Sigma = _checked_cov(F, "factor")
    return float(mu @ np.linalg.solve(Sigma, mu))


def _log_ml_mniw(Y: np.ndarray, X: np.ndarray, B0: np.ndarray, Omega0: np.ndarray,
                 S0: np.ndarray, nu0: float, what: str) -> float:
    """Closed-form log marginal likelihood of a conjugate regression block.

    Y = X B + E with matrix-normal prior B | Sigma ~ MN(B0, Omega0^-1, Sigma)
    and Sigma ~ IW(nu0, S0).
    """
    n, d = Y.shape
    Omega_n = Omega0 + X.T @ X
    Bn = np.linalg.solve(Omega_n, Omega0 @ B0 + X.T @ Y)
    Sn = S0 + Y.T @ Y + B0.T @ Omega0 @ B0 - Bn.T @ Omega_n @ Bn
    Sn = (Sn + Sn.T) / 2.0
    nu_n = nu0 + n
    sign0, logdet_S0 = np.linalg.slogdet(S0)
    sign_n, logdet_Sn = np.linalg.slogdet(Sn)
    sign_o0, logdet_O0 = np.linalg.slogdet(Omega0)
    sign_on, logdet_On = np.linalg.slogdet(Omega_n)
    if min(sign0, sign_n, sign_o0, sign_on) <= 0:
        raise EstimationError(f"covariance degeneracy in {what} block")
    return (-0.5 * n * d * math.log(math.pi)
            + multigammaln(nu_n / 2.0, d) - multigammaln(nu0 / 2.0, d)
            + 0.5 * nu0 * logdet_S0 - 0.5 * nu_n * logdet_Sn
            + 0.5 * d * (logdet_O0 - logdet_On))


def log_marginal(spec: ModelSpec, F_post: np.ndarray, prior: PriorSpec) -> float:
    """Log evidence of a model on the posterior sub-sample.

    The included block is the mean model with prior alpha | Sigma ~
    N(alpha0, k Sigma); the excluded block is the regression on included
    factors with the intercept excluded (zero alpha under mean-variance
    efficiency of the included set). Inverse-Wishart degrees of freedom are
    dimension + 2 with the prior sub-sample covariances as scales.
    """
    F_post = np.atleast_2d(np.asarray(F_post, dtype=float))
    n, J = F_post.shape
    if n <= J + 2:
        raise ValidationError(f"posterior sub-sample of {n} months too short")
    inc = F_post[:, list(spec.included)]
    d_inc = spec.n_included
    lm = _log_ml_mniw(
        Y=inc, X=np.ones((n, 1)), B0=prior.alpha0.reshape(1, d_inc),
        Omega0=np.array([[1.0 / prior.k]]), S0=prior.Sigma0,
        nu0=d_inc + 2.0, what="included")
    if spec.excluded:
        exc = F_post[:, list(spec.excluded)]
        lm += _log_ml_mniw(
            Y=exc, X=inc, B0=prior.beta0, Omega0=prior.gram0,
            S0=prior.Sigma0_excl, nu0=len(spec.excluded) + 2.0, what="excluded")
    return float(lm)


def posterior_rank(F: np.ndarray, tr: float = DEFAULT_TR,
                   sh2max: float | None = None,
                   top_n: int | None = 10) -> list[ModelPosterior]:
    """Rank all factor subsets by posterior probability under equal priors.

    Returns the ``top_n`` models (all of them when None) sorted by
    descending posterior with the subset code as tie-break.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    T, J = F.shape
    specs = enumerate_models(J)
    n0 = int(math.floor(tr * T))
    if sh2max is None:
        if n0 < J + 2:
            raise EstimationError(
                f"prior sub-sample of {n0} months too short for {J} factors")
        sh2max = max_squared_sharpe(F[:n0])
    F_post = F[n0:]
    lms = np.array([
        log_marginal(spec, F_post, estimate_prior(F, spec, tr, sh2max))
        for spec in specs
    ])
    posts = np.exp(lms - logsumexp(lms))
    ranked = sorted(
        (ModelPosterior(spec=s, log_marginal=float(l), posterior=float(p))
         for s, l, p in zip(specs, lms, posts)),
        key=lambda mp: (-mp.posterior, mp.spec.code))
    return ranked if top_n is None else ranked[:top_n]
