"""Seeded synthetic data generators for tests and pipeline fixtures.

The planted panel couples two structures: characteristics are correlated in
blocks (driving the similarity/clustering stages) and the same blocks define
the nonzero pattern of the true loading matrix (driving factor recovery),
plus a market factor loading on the intercept alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import Partition
from .errors import ValidationError
from .factor_model import restriction_mask_from_partition
from .panel import CharacteristicPanel, standardize


@dataclass
class PlantedTruth:
    """Ground truth behind a synthetic panel."""

    partition: Partition
    gamma: np.ndarray             # (I+1, K+1) true loadings, ZC last
    factors: np.ndarray           # (T, K+1) true factor draws
    noiseless: list[np.ndarray]   # per-month Z Gamma f component
    noise_sd: float


def block_partition(n_chars: int, n_clusters: int) -> Partition:
    """Contiguous equal-size blocks (first blocks get the remainder)."""
    if n_clusters > n_chars:
        raise ValidationError("more clusters than characteristics")
    sizes = [n_chars // n_clusters + (1 if b < n_chars % n_clusters else 0)
             for b in range(n_clusters)]
    assignment = np.repeat(np.arange(n_clusters), sizes)
    return Partition(assignment=assignment, K=n_clusters)


def make_characteristics(n_assets: int, n_months: int, n_chars: int,
                         partition: Partition, intra: float = 0.8,
                         inter: float = 0.2, rng: np.random.Generator | None = None,
                         seed: int = 0) -> list[np.ndarray]:
    """Gaussian characteristics with planted block correlations.

    Within a block the pairwise correlation is ``intra``; across blocks it
    is ``inter`` (via a common component shared by all characteristics).
    """
    if not 0.0 <= inter <= intra < 1.0:
        raise ValidationError("need 0 <= inter <= intra < 1")
    rng = rng or np.random.default_rng(seed)
    a_common = np.sqrt(inter)
    a_block = np.sqrt(intra - inter)
    a_idio = np.sqrt(1.0 - intra)
    X = []
    for _ in range(n_months):
        common = rng.standard_normal(n_assets)
        latents = rng.standard_normal((n_assets, partition.K))
        eps = rng.standard_normal((n_assets, n_chars))
        Xt = (a_common * common[:, None]
              + a_block * latents[:, partition.assignment]
              + a_idio * eps)
        X.append(Xt)
    return X


def make_planted_panel(n_assets: int = 200, n_months: int = 240,
                       n_chars: int = 12, n_clusters: int = 3, *,
                       seed: int = 0, noise_scale: float = 0.5,
                       intra: float = 0.8, inter: float = 0.2,
                       factor_means: np.ndarray | None = None,
                       factor_sds: np.ndarray | None = None,
                       ) -> tuple[CharacteristicPanel, PlantedTruth]:
    """Panel whose returns follow the cluster-restricted factor structure.

    Returns are Z Gamma* f* plus Gaussian noise with standard deviation
    ``noise_scale`` times the signal's. Gamma* gives each cluster factor
    equal weights on its own characteristics and the last (market) factor a
    loading on the intercept only.
    """
    rng = np.random.default_rng(seed)
    partition = block_partition(n_chars, n_clusters)
    X = make_characteristics(n_assets, n_months, n_chars, partition,
                             intra=intra, inter=inter, rng=rng)
    dates = [198501 + 100 * (t // 12) + t % 12 for t in range(n_months)]
    assets = [np.array([f"a{i:04d}" for i in range(n_assets)]) for _ in range(n_months)]
    mktcap = [np.exp(rng.normal(loc=2.0, scale=1.0, size=n_assets))
              for _ in range(n_months)]
    prices = [np.full(n_assets, 10.0) for _ in range(n_months)]
    char_names = [f"c{i:02d}" for i in range(n_chars)]

    panel = CharacteristicPanel(
        dates=dates, assets=assets, X=X,
        returns=[np.zeros(n_assets) for _ in range(n_months)],
        mktcap=mktcap, prices=prices, char_names=char_names)
    Z = standardize(panel)

    J = n_clusters + 1
    mask = restriction_mask_from_partition(partition, include_zc=True).mask
    gamma = np.zeros((n_chars + 1, J))
    for k, members in enumerate(partition.clusters()):
        gamma[members, k] = 1.0 / np.sqrt(len(members))
    gamma[n_chars, J - 1] = 1.0
    assert np.all(gamma[~mask] == 0)

    if factor_means is None:
        factor_means = np.concatenate([
            np.linspace(0.006, 0.003, n_clusters), [0.005]])
    if factor_sds is None:
        factor_sds = np.concatenate([np.full(n_clusters, 0.02), [0.04]])
    factors = rng.standard_normal((n_months, J)) * factor_sds + factor_means

    noiseless = [Z.Z[t] @ gamma @ factors[t] for t in range(n_months)]
    signal_sd = float(np.std(np.concatenate(noiseless)))
    noise_sd = noise_scale * signal_sd
    returns = [nl + rng.normal(scale=noise_sd, size=n_assets) for nl in noiseless]
    panel.returns = returns

    truth = PlantedTruth(partition=partition, gamma=gamma, factors=factors,
                         noiseless=noiseless, noise_sd=noise_sd)
    return panel, truth


def make_mve_factors(n_months: int = 600, n_factors: int = 5,
                     included: tuple[int, ...] = (0, 1), *,
                     seed: int = 0) -> np.ndarray:
    """Factor set where the included subset spans the tangency portfolio.

    The included factors have free means; every excluded factor is a linear
    combination of the included ones plus noise with exactly zero intercept,
    so the included subset prices the rest.
    """
    rng = np.random.default_rng(seed)
    p = len(included)
    excluded = tuple(j for j in range(n_factors) if j not in included)
    means = np.linspace(0.010, 0.007, p)
    sds = np.linspace(0.02, 0.03, p)
    base = rng.standard_normal((n_months, p)) * sds + means
    betas = rng.normal(scale=0.6, size=(p, len(excluded)))
    # Sizeable idiosyncratic noise keeps excluded factors from substituting
    # for an included one (they span the tangency only through the base).
    noise = rng.standard_normal((n_months, len(excluded))) * 0.03
    F = np.empty((n_months, n_factors))
    F[:, list(included)] = base
    F[:, list(excluded)] = base @ betas + noise
    return F


def make_random_panel(n_assets: int = 100, n_months: int = 60,
                      n_chars: int = 10, *, seed: int = 0
                      ) -> CharacteristicPanel:
    """Unstructured panel: iid characteristics and returns."""
    rng = np.random.default_rng(seed)
    dates = [200001 + 100 * (t // 12) + t % 12 for t in range(n_months)]
    assets = [np.array([f"a{i:04d}" for i in range(n_assets)]) for _ in range(n_months)]
    return CharacteristicPanel(
        dates=dates, assets=assets,
        X=[rng.standard_normal((n_assets, n_chars)) for _ in range(n_months)],
        returns=[rng.normal(scale=0.05, size=n_assets) for _ in range(n_months)],
        mktcap=[np.exp(rng.normal(size=n_assets)) for _ in range(n_months)],
        prices=[np.full(n_assets, 10.0) for _ in range(n_months)],
        char_names=[f"c{i:02d}" for i in range(n_chars)])


