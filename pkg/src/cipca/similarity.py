"""Pairwise characteristic similarity from weighted rank correlations.

For a pair of characteristics the monthly weighted correlation of their
cross-sectional ranks is averaged over months, and the similarity is
exp(-(1 - |rho|)), so strongly anti-correlated pairs count as similar.
Distances are 1/s - 1, reversing the similarity ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DomainError, UndefinedCorrelationError, ValidationError
from .panel import RankPanel, WeightSeries


@dataclass
class SimilarityMatrix:
    """Symmetric similarity matrix S with its underlying rank correlations."""

    S: np.ndarray          # (I, I), entries in [e^-1, 1], unit diagonal
    rho: np.ndarray        # (I, I), averaged weighted rank correlations
    char_names: list[str]

    def to_frame(self, which: str = "S") -> pd.DataFrame:
        mat = {"S": self.S, "rho": self.rho}[which]
        return pd.DataFrame(mat, index=self.char_names, columns=self.char_names)


@dataclass
class DistanceMatrix:
    """Nonnegative distances d = 1/s - 1 with zero diagonal."""

    D: np.ndarray
    char_names: list[str]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.D, index=self.char_names, columns=self.char_names)


def _check_aligned(ranks: RankPanel, weights: WeightSeries) -> None:
    if ranks.dates != weights.dates:
        raise ValidationError("rank panel and weight series cover different months")


def _monthly_corr(R: np.ndarray, w: np.ndarray, char_valid: np.ndarray):
    """Weighted correlation matrix of rank columns for one month.

    Returns the (I, I) correlation matrix (upper triangle mirrored so it is
    exactly symmetric) and a validity flag per characteristic (observed this
    month and positive weighted variance). Invalid rows/columns hold zeros.
    """
    xbar = w @ R
    Xc = R - xbar
    cov = (Xc * w[:, None]).T @ Xc
    var = np.diag(cov).copy()
    ok = char_valid & (var > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = cov / np.sqrt(np.outer(var, var))
    corr = np.triu(corr) + np.triu(corr, 1).T
    pair_ok = np.outer(ok, ok)
    corr = np.where(pair_ok, corr, 0.0)
    return corr, ok


def similarity_from_correlation(rho) -> np.ndarray | float:
    """Map rank correlations to similarities exp(-(1 - |rho|))."""
    return np.exp(-(1.0 - np.abs(rho)))


def rank_correlation(ranks: RankPanel, i: int, j: int, weights: WeightSeries) -> float:
    """Time-series average of monthly weighted rank correlations for (i, j).

    Months where either characteristic is unobserved or has zero weighted
    variance are skipped; if no month is usable the correlation is
    undefined.
    """
    _check_aligned(ranks, weights)
    if i == j:
        return 1.0
    a, b = (i, j) if i < j else (j, i)
    total = 0.0
    count = 0
    for t in range(len(ranks.dates)):
        corr, ok = _monthly_corr(ranks.ranks[t], weights.w[t], ranks.valid[t])
        if ok[a] and ok[b]:
            total += corr[a, b]
            count += 1
    if count == 0:
        raise UndefinedCorrelationError(
            f"correlation of characteristics {ranks.char_names[i]!r} and "
            f"{ranks.char_names[j]!r} undefined in every month")
    return min(1.0, max(-1.0, total / count))


def similarity_matrix(ranks: RankPanel, weights: WeightSeries) -> SimilarityMatrix:
    """Full similarity matrix s_ij = exp(-(1 - |rho_ij|)) over all pairs."""
    _check_aligned(ranks, weights)
    n = len(ranks.char_names)
    total = np.zeros((n, n))
    count = np.zeros((n, n), dtype=int)
    for t in range(len(ranks.dates)):
        corr, ok = _monthly_corr(ranks.ranks[t], weights.w[t], ranks.valid[t])
        pair_ok = np.outer(ok, ok)
        total += corr
        count += pair_ok
    if np.any(count == 0):
        i, j = np.argwhere(count == 0)[0]
        raise UndefinedCorrelationError(
            f"correlation of characteristics {ranks.char_names[i]!r} and "
            f"{ranks.char_names[j]!r} undefined in every month")
    rho = np.clip(total / count, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    S = similarity_from_correlation(rho)
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(S=S, rho=rho, char_names=list(ranks.char_names))


def to_distance(sim: SimilarityMatrix) -> DistanceMatrix:
    """Transform similarities into distances d = 1/s - 1."""
    if np.any(sim.S <= 0):
        raise DomainError("similarities must be strictly positive")
    D = 1.0 / sim.S - 1.0
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(D=D, char_names=list(sim.char_names))
