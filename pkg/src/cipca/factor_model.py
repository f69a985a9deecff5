"""Restricted instrumented-PCA estimation by alternating least squares.

Returns are modeled as r_t = Z_{t-1} Gamma f_t + e_t where Z holds the
standardized characteristics plus a constant. Cluster restrictions force
chosen entries of Gamma to zero: factor k loads only on its cluster's
characteristics (plus the intercept row), and an optional extra factor loads
on the intercept alone, so it is uncorrelated with every characteristic.

Estimation alternates exact weighted least-squares solves for the factors
(given Gamma) and for the free entries of Gamma (given factors), so the
weighted squared error never increases. At convergence each factor is scaled
to a 1% monthly standard deviation with a nonnegative mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .clustering import Partition
from .errors import EstimationError, RankDeficiencyError, ValidationError
from .panel import InstrumentMatrix, WeightSeries

logger = logging.getLogger(__name__)

FACTOR_SD = 0.01  # identification: monthly factor standard deviation
RIDGE_SCALE = 1e-10


@dataclass
class RestrictionMask:
    """Boolean (I+1, J) matrix; True marks a free Gamma coefficient."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValidationError("mask must be two-dimensional")
        if not self.mask.any(axis=0).all():
            raise ValidationError("every factor column needs at least one free loading")

    @property
    def n_instruments(self) -> int:
        return self.mask.shape[0]

    @property
    def n_factors(self) -> int:
        return self.mask.shape[1]

    @classmethod
    def unrestricted(cls, n_chars: int, n_factors: int) -> "RestrictionMask":
        return cls(np.ones((n_chars + 1, n_factors), dtype=bool))

    @classmethod
    def zc_only(cls, n_chars: int) -> "RestrictionMask":
        mask = np.zeros((n_chars + 1, 1), dtype=bool)
        mask[-1, 0] = True
        return cls(mask)


def restriction_mask_from_partition(partition: Partition,
                                    include_zc: bool = True) -> RestrictionMask:
    """Mask with one factor per cluster plus an optional intercept-only factor.

    Column k is free on the rows of cluster k and on the intercept row; the
    trailing column (if requested) is free on the intercept row only.
    """
    partition.validate()
    I = len(partition.assignment)
    J = partition.K + (1 if include_zc else 0)
    mask = np.zeros((I + 1, J), dtype=bool)
    for k, members in enumerate(partition.clusters()):
        mask[members, k] = True
        mask[I, k] = True
    if include_zc:
        mask[I, J - 1] = True
    return RestrictionMask(mask)


@dataclass
class FittedModel:
    """Estimated loadings, factor series and fit diagnostics."""

    Gamma: np.ndarray                # (I+1, J), masked entries exactly zero
    factors: np.ndarray              # (T, J) monthly factor returns (decimal)
    objective_path: list[float]      # weighted SSE per iteration, nonincreasing
    residuals: list[np.ndarray]      # per-month r - Z Gamma f
    converged: bool
    iterations: int
    dates: list[int]
    mask: RestrictionMask
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_factors(self) -> int:
        return self.Gamma.shape[1]

    def to_dict(self) -> dict:
        return {
            "gamma": self.Gamma.tolist(),
            "mask": self.mask.mask.astype(int).tolist(),
            "factors": self.factors.tolist(),
            "dates": list(map(int, self.dates)),
            "objective_path": list(map(float, self.objective_path)),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "diagnostics": {k: v for k, v in self.diagnostics.items()},
        }


@dataclass
class FactorReturnSeries:
    """Out-of-sample realized factor returns, one row per realized month."""

    dates: list[int]
    F: np.ndarray                    # (T_oos, J)
    weight_snapshots: list[np.ndarray] | None = None

    def to_frame(self, names: Sequence[str] | None = None) -> pd.DataFrame:
        if names is None:
            names = [f"f{j}" for j in range(self.F.shape[1])]
        df = pd.DataFrame(self.F, columns=list(names))
        df.insert(0, "date", self.dates)
        return df


def _check_inputs(Z: InstrumentMatrix, returns: Sequence[np.ndarray],
                  weights: WeightSeries, mask: RestrictionMask) -> None:
    T = len(Z.Z)
    if T < 2:
        raise ValidationError("estimation needs at least two months")
    if len(returns) != T or len(weights.w) != T:
        raise ValidationError("instruments, returns and weights cover different months")
    L, J = mask.mask.shape
    if L != Z.n_instruments:
        raise ValidationError(
            f"mask has {L} rows but instruments have {Z.n_instruments} columns")
    for t in range(T):
        n = Z.Z[t].shape[0]
        if len(returns[t]) != n or len(weights.w[t]) != n:
            raise ValidationError(f"month index {t}: ragged cross-section")
        if n < J:
            raise ValidationError(
                f"month index {t}: {n} assets cannot identify {J} factors")


def _init_gamma(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Deterministic warm start from the SVD of managed-portfolio returns."""
    L, J = mask.shape
    Q = q.T
    U, _, _ = np.linalg.svd(Q, full_matrices=False)
    Gamma = np.zeros((L, J))
    avail = U.shape[1]
    for j in range(J):
        col = U[:, j].copy() if j < avail else np.zeros(L)
        peak = np.argmax(np.abs(col)) if j < avail else 0
        if j < avail and col[peak] < 0:
            col = -col
        col[~mask[:, j]] = 0.0
        norm = np.linalg.norm(col)
        if norm < 1e-12:
            col = np.zeros(L)
            free = np.flatnonzero(mask[:, j])
            col[free] = 1.0 / np.sqrt(free.size)
        Gamma[:, j] = col
    return Gamma


def _solve_gram(gram: np.ndarray, rhs: np.ndarray, month: int | None,
                ridge: bool, ridged: list) -> np.ndarray:
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        if ridge:
            bump = RIDGE_SCALE * np.trace(gram)
            if month is not None:
                ridged.append(month)
            return np.linalg.solve(gram + bump * np.eye(gram.shape[0]), rhs)
        where = f" in month {month}" if month is not None else ""
        raise RankDeficiencyError(f"singular Gram matrix{where}") from None


def fit(Z: InstrumentMatrix, returns: Sequence[np.ndarray], weights: WeightSeries,
        mask: RestrictionMask, *, tol: float = 1e-8, max_iter: int = 1000,
        init: np.ndarray | None = None, ridge: bool = False,
        param_tol: float | None = None) -> FittedModel:
    """Estimate the restricted model by alternating least squares.

    Parameters
    ----------
    Z, returns, weights
        Aligned monthly instruments, excess returns and weights.
    mask
        Free/zero pattern for Gamma; masked entries are exactly zero in the
        result.
    tol
        Stop when the relative change in weighted SSE falls below this.
    max_iter
        Iteration cap; hitting it returns ``converged=False``.
    init
        Optional starting Gamma (e.g. the previous month's estimate in a
        rolling refit); defaults to a deterministic SVD-based start.
    ridge
        If set, near-singular monthly Gram matrices are bumped by
        1e-10 * trace and the affected months reported in diagnostics.
    param_tol
        When given, convergence instead requires the relative change of the
        iterates themselves to fall below this; drives the stationarity
        residuals far below what SSE-change stopping can resolve.

    Raises
    ------
    RankDeficiencyError
        Singular factor Gram matrix (naming the month) or singular
        restricted loading system.
    """
    _check_inputs(Z, returns, weights, mask)
    M = mask.mask
    L, J = M.shape
    T = len(Z.Z)
    free = M.ravel()

    # Month-constant building blocks: G_t = Z'WZ and q_t = Z'Wr.
    G = np.stack([Zt.T @ (wt[:, None] * Zt) for Zt, wt in zip(Z.Z, weights.w)])
    q = np.stack([Zt.T @ (wt * rt) for Zt, rt, wt in zip(Z.Z, returns, weights.w)])
    ridged: list[int] = []

    def f_step(Gamma: np.ndarray) -> np.ndarray:
        gram = Gamma.T[None] @ (G @ Gamma)          # (T, J, J)
        rhs = q @ Gamma                             # (T, J)
        try:
            return np.linalg.solve(gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            F = np.empty((T, J))
            for t in range(T):
                F[t] = _solve_gram(gram[t], rhs[t], Z.dates[t], ridge, ridged)
            return F

    def gamma_step(F: np.ndarray) -> np.ndarray:
        outer = F[:, :, None] * F[:, None, :]       # (T, J, J)
        A = np.tensordot(G, outer, axes=(0, 0))     # (L, L, J, J)
        A = A.transpose(0, 2, 1, 3).reshape(L * J, L * J)
        b = (q[:, :, None] * F[:, None, :]).sum(axis=0).ravel()
        try:
            sol = np.linalg.solve(A[np.ix_(free, free)], b[free])
        except np.linalg.LinAlgError:
            raise RankDeficiencyError("restricted loading system is singular") from None
        flat = np.zeros(L * J)
        flat[free] = sol
        return flat.reshape(L, J)

    def sse(Gamma: np.ndarray, F: np.ndarray) -> float:
        total = 0.0
        for t in range(T):
            resid = returns[t] - Z.Z[t] @ (Gamma @ F[t])
            total += float(weights.w[t] @ resid**2)
        return total

    Gamma = _init_gamma(q, M) if init is None else np.where(M, init, 0.0)
    F = f_step(Gamma)
    objective_path = [sse(Gamma, F)]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        prev_gamma, prev_f = Gamma, F
        Gamma = gamma_step(F)
        F = f_step(Gamma)
        objective_path.append(sse(Gamma, F))
        if param_tol is not None:
            delta = max(
                np.linalg.norm(Gamma - prev_gamma) / max(np.linalg.norm(prev_gamma), 1e-300),
                np.linalg.norm(F - prev_f) / max(np.linalg.norm(prev_f), 1e-300))
            if delta <= param_tol:
                converged = True
                break
        else:
            prev, cur = objective_path[-2], objective_path[-1]
            if abs(prev - cur) <= tol * max(prev, 1e-300):
                converged = True
                break

    diagnostics = _stationarity(Gamma, F, G, q, free, L, J)
    if ridged:
        diagnostics["ridged_months"] = sorted(set(ridged))

    # Identification: 1% monthly SD per factor, nonnegative mean; the
    # loading/factor product (and hence the objective) is unchanged.
    sd = F.std(axis=0)
    if np.any(sd == 0):
        j = int(np.argmin(sd))
        raise EstimationError(f"factor column {j} has zero variance; cannot normalize")
    scale = sd / FACTOR_SD
    F = F / scale
    Gamma = Gamma * scale
    flip = np.where(F.mean(axis=0) < 0, -1.0, 1.0)
    F = F * flip
    Gamma = Gamma * flip

    residuals = [returns[t] - Z.Z[t] @ (Gamma @ F[t]) for t in range(T)]
    return FittedModel(Gamma=Gamma, factors=F, objective_path=objective_path,
                       residuals=residuals, converged=converged,
                       iterations=iterations, dates=list(Z.dates), mask=mask,
                       diagnostics=diagnostics)


def _stationarity(Gamma, F, G, q, free, L, J) -> dict:
    """Relative residuals of the two first-order-condition systems."""
    rhs = q @ Gamma
    fitted = (Gamma.T[None] @ (G @ Gamma)) @ F[..., None]
    res = rhs - fitted[..., 0]
    refs = np.maximum(np.linalg.norm(rhs, axis=1), 1e-300)
    worst_f = float((np.linalg.norm(res, axis=1) / refs).max())
    outer = F[:, :, None] * F[:, None, :]
    A = np.tensordot(G, outer, axes=(0, 0)).transpose(0, 2, 1, 3).reshape(L * J, L * J)
    b = (q[:, :, None] * F[:, None, :]).sum(axis=0).ravel()
    res_g = A[np.ix_(free, free)] @ Gamma.ravel()[free] - b[free]
    rel_g = float(np.linalg.norm(res_g)) / max(float(np.linalg.norm(b[free])), 1e-300)
    return {"foc_factor_rel": worst_f, "foc_gamma_rel": rel_g}


def factor_weights(Gamma: np.ndarray, Z_t: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """Portfolio weights turning next-month returns into factor returns.

    Rows are factors, columns assets: (G'Z'WZG)^-1 G'Z'W. Everything here is
    known one period ahead of the return being weighted.
    """
    ZW = Z_t * w_t[:, None]
    gram = Gamma.T @ Z_t.T @ ZW @ Gamma
    try:
        return np.linalg.solve(gram, Gamma.T @ ZW.T)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("singular factor Gram matrix") from None


def realize_factors(Gamma: np.ndarray, Z_t: np.ndarray, w_t: np.ndarray,
                    r_t: np.ndarray) -> np.ndarray:
    """Realized factor returns: the weight operator applied to returns."""
    return factor_weights(Gamma, Z_t, w_t) @ r_t


def oos_factor_returns(Z: InstrumentMatrix, returns: Sequence[np.ndarray],
                       weights: WeightSeries, mask: RestrictionMask,
                       burn_in: int = 180, *, tol: float = 1e-8,
                       max_iter: int = 1000, warm_start: bool = True,
                       snapshot_weights: bool = False,
                       ridge: bool = False) -> FactorReturnSeries:
    """Rolling out-of-sample factor returns.

    For each month s >= ``burn_in`` the model is refit on months [0, s) and
    the factor return realized from month s's instruments, weights and
    returns, so every realized value uses only parameters estimable at the
    time. Refits warm-start from the previous estimate by default.
    """
    T = len(returns)
    if T <= burn_in:
        raise ValidationError(f"need more than burn_in={burn_in} months, got {T}")
    rows = []
    snaps: list[np.ndarray] = []
    prev_gamma = None
    for s in range(burn_in, T):
        sub = InstrumentMatrix(dates=Z.dates[:s], Z=Z.Z[:s], char_names=Z.char_names)
        wsub = WeightSeries(dates=weights.dates[:s], scheme=weights.scheme,
                            w=weights.w[:s])
        try:
            model = fit(sub, returns[:s], wsub, mask, tol=tol, max_iter=max_iter,
                        init=prev_gamma if warm_start else None, ridge=ridge)
        except Exception as exc:
            raise EstimationError(
                f"rolling fit through month {Z.dates[s - 1]} failed: {exc}") from exc
        W_op = factor_weights(model.Gamma, Z.Z[s], weights.w[s])
        rows.append(W_op @ returns[s])
        if snapshot_weights:
            snaps.append(W_op)
        prev_gamma = model.Gamma
    return FactorReturnSeries(dates=list(Z.dates[burn_in:]), F=np.array(rows),
                              weight_snapshots=snaps if snapshot_weights else None)
