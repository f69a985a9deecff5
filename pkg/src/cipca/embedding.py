"""Two-dimensional metric MDS of the characteristic distance matrix.

Coordinates minimize the normalized stress
sqrt(sum (d_ij - dhat_ij)^2 / sum d_ij^2) by iterative majorization
(Guttman transform) from a classical-scaling start, so the stress never
increases and the result is deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import DomainError, ValidationError
from .similarity import DistanceMatrix


@dataclass
class Embedding:
    coords: np.ndarray          # (I, 2)
    stress: float               # final normalized stress, in [0, 1]
    iterations: int
    stress_path: list[float]    # per-iteration normalized stress


def _check_distance(D: np.ndarray) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValidationError("distance matrix must be square")
    if not np.allclose(D, D.T, atol=1e-12):
        raise ValidationError("distance matrix must be symmetric")
    if np.any(np.diag(D) != 0):
        raise ValidationError("distance matrix must have a zero diagonal")
    if np.any(D < 0):
        raise ValidationError("distances must be nonnegative")
    if not np.any(D > 0):
        raise DomainError("all distances are zero; embedding is degenerate")
    return D


def _classical_init(D: np.ndarray, seed: int) -> np.ndarray:
    """Classical-scaling start; random jitter only for degenerate dimensions."""
    n = D.shape[0]
    J = np.eye(n) - np.ones((n, n)) / n
    B = -0.5 * J @ (D**2) @ J
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1]
    coords = np.zeros((n, 2))
    rng = np.random.default_rng(seed)
    scale = D[D > 0].mean()
    for dim in range(2):
        lam = vals[order[dim]]
        if lam > 1e-12:
            v = vecs[:, order[dim]]
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            coords[:, dim] = v * np.sqrt(lam)
        else:
            coords[:, dim] = rng.normal(scale=1e-3 * scale, size=n)
    return coords


def mds_embed(D: DistanceMatrix | np.ndarray, tol: float = 1e-9,
              max_iter: int = 2000, seed: int = 0) -> Embedding:
    """Embed a distance matrix in the plane by stress majorization.

    Raises
    ------
    DomainError
        All-zero distance matrix.
    ValidationError
        Asymmetric, negative or non-zero-diagonal input.
    """
    if isinstance(D, DistanceMatrix):
        D = D.D
    D = _check_distance(D)
    n = D.shape[0]
    denom = float(np.sum(np.triu(D, 1) ** 2))
    X = _classical_init(D, seed)

    def normalized_stress(X: np.ndarray) -> tuple[float, np.ndarray]:
        dhat = squareform(pdist(X))
        raw = float(np.sum(np.triu(D - dhat, 1) ** 2))
        return np.sqrt(raw / denom), dhat

    stress, dhat = normalized_stress(X)
    path = [stress]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dhat > 0, D / np.where(dhat > 0, dhat, 1.0), 0.0)
        B = -ratio
        np.fill_diagonal(B, 0.0)
        np.fill_diagonal(B, -B.sum(axis=1))
        X = (B @ X) / n
        prev = stress
        stress, dhat = normalized_stress(X)
        path.append(stress)
        if prev - stress <= tol * max(prev, 1e-300):
            break
    return Embedding(coords=X, stress=stress, iterations=iterations,
                     stress_path=path)
