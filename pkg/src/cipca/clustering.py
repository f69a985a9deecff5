"""Constrained split-and-merge clustering of characteristics.

The pipeline sparsifies the similarity matrix to a knn graph, bisects the
prior clusters spectrally into m basic sub-clusters, then greedily re-merges
the pair with the highest relative inter-cluster similarity (RIS) until the
target cluster count. The stopping count K is picked automatically from the
sharp drop in the max-RIS path, and (m, knn) by a grid search scored on the
training-sample tangency Sharpe ratio.

Unconstrained splitting (ignoring the prior) gives the purely data-driven
variant; seeded random partitions give the placebo variant.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph

from .errors import CipcaError, InfeasibleSplitError, ValidationError
from .panel import CharacteristicPanel, build_weights, rank_transform, standardize
from .similarity import SimilarityMatrix, similarity_matrix

logger = logging.getLogger(__name__)

DEFAULT_F = 1e3
DEFAULT_ETA = 1.3
MAX_RELAX = 64


@dataclass
class SparseGraph:
    """Symmetrized knn similarity graph; absent edges carry weight zero."""

    n: int
    weights: np.ndarray    # (n, n) symmetric, zero where no edge
    adjacency: np.ndarray  # (n, n) bool

    @property
    def edges(self) -> set[tuple[int, int]]:
        ii, jj = np.nonzero(np.triu(self.adjacency, 1))
        return {(int(i), int(j)) for i, j in zip(ii, jj)}


@dataclass
class Partition:
    """Assignment of each characteristic to one of K clusters."""

    assignment: np.ndarray          # (I,) ints in 0..K-1
    K: int
    labels: list[str] | None = None

    def validate(self) -> None:
        ids = np.unique(self.assignment)
        if self.K < 1 or len(ids) != self.K or ids.min() != 0 or ids.max() != self.K - 1:
            raise ValidationError(
                f"assignment does not form {self.K} nonempty clusters 0..{self.K - 1}")

    def clusters(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == k) for k in range(self.K)]

    def to_frame(self, char_names: Sequence[str]) -> pd.DataFrame:
        labels = self.labels or [str(k) for k in range(self.K)]
        return pd.DataFrame({
            "characteristic": list(char_names),
            "cluster": self.assignment.astype(int),
            "label": [labels[k] for k in self.assignment],
        })


def partition_from_frame(df: pd.DataFrame, char_names: Sequence[str]) -> Partition:
    """Build a Partition from a (characteristic, cluster[, label]) table."""
    if not {"characteristic", "cluster"} <= set(df.columns):
        raise ValidationError("partition table needs 'characteristic' and 'cluster' columns")
    by_char = df.set_index("characteristic")
    missing = [c for c in char_names if c not in by_char.index]
    if missing:
        raise ValidationError(f"partition lacks characteristics {missing}")
    raw = [by_char.loc[c, "cluster"] for c in char_names]
    uniq = sorted(set(raw), key=str)
    to_id = {c: k for k, c in enumerate(uniq)}
    assignment = np.array([to_id[c] for c in raw], dtype=int)
    labels = [str(c) for c in uniq]
    part = Partition(assignment=assignment, K=len(uniq), labels=labels)
    part.validate()
    return part


@dataclass
class MergeStep:
    pair: tuple[int, int]   # basic sub-cluster ids merged (i < j)
    max_ris: float          # RIS of the merged pair == max over live pairs
    k_after: int


@dataclass
class MergeTrace:
    """History of the greedy merge phase, ordered from m clusters downwards."""

    basic_subclusters: list[list[int]]
    steps: list[MergeStep] = field(default_factory=list)

    def max_ris_by_k(self) -> dict[int, float]:
        """Max_RIS of the merge entering each cluster count, keys m-1..1."""
        return {s.k_after: s.max_ris for s in self.steps}

    def to_dict(self) -> dict:
        return {
            "basic_subclusters": [list(map(int, c)) for c in self.basic_subclusters],
            "steps": [
                {"pair": list(s.pair), "max_ris": s.max_ris, "k_after": s.k_after}
                for s in self.steps
            ],
        }


@dataclass(frozen=True)
class HyperParams:
    knn: int
    m: int
    K: int
    f: float = DEFAULT_F
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        if not (1 <= self.K <= self.m):
            raise ValidationError(f"need 1 <= K <= m, got K={self.K}, m={self.m}")
        if self.knn < 1:
            raise ValidationError("knn must be >= 1")
        if self.f <= 1 or self.eta <= 1:
            raise ValidationError("f and eta must exceed 1")


def knn_sparsify(sim: SimilarityMatrix | np.ndarray, knn: int) -> SparseGraph:
    """Keep an edge iff either endpoint lists the other among its knn nearest.

    Neighbor order is by descending similarity with index tie-break, so the
    graph is deterministic. Omitted edges shrink weak similarities to zero.
    """
    S = sim.S if isinstance(sim, SimilarityMatrix) else np.asarray(sim, dtype=float)
    n = S.shape[0]
    if not 1 <= knn <= n - 1:
        raise ValidationError(f"need 1 <= knn <= {n - 1}, got {knn}")
    adjacency = np.zeros((n, n), dtype=bool)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (-S[i, j], j))
        for j in others[:knn]:
            adjacency[i, j] = True
            adjacency[j, i] = True
    weights = np.where(adjacency, S, 0.0)
    np.fill_diagonal(weights, 0.0)
    return SparseGraph(n=n, weights=weights, adjacency=adjacency)


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def _spectral_bisect(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split vertices of a weighted subgraph in two by the Fiedler vector.

    Disconnected subgraphs are split along component boundaries (any such
    cut has zero inter-part similarity, and the degenerate null space would
    make the eigenvector split arbitrary). Connected subgraphs use the
    normalized Laplacian's second eigenvector with a sign split, falling
    back to a median split if one side comes out empty. Returns local index
    arrays (side_a, side_b), both nonempty.
    """
    k = W.shape[0]
    n_comp, labels = scipy.sparse.csgraph.connected_components(
        scipy.sparse.csr_matrix(W != 0), directed=False)
    if n_comp > 1:
        comps = sorted((np.flatnonzero(labels == c) for c in range(n_comp)),
                       key=lambda v: (-v.size, v[0]))
        side_a = comps[0]
        side_b = np.sort(np.concatenate(comps[1:]))
        return side_a, side_b
    deg = W.sum(axis=1)
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(k) - (dinv[:, None] * W) * dinv[None, :]
    lap = (lap + lap.T) / 2.0
    vals, vecs = scipy.linalg.eigh(lap)
    fiedler = _canonical_sign(vecs[:, 1])
    side_a = np.flatnonzero(fiedler < 0)
    side_b = np.flatnonzero(fiedler >= 0)
    if side_a.size == 0 or side_b.size == 0:
        order = np.argsort(fiedler, kind="stable")
        half = k // 2
        side_a, side_b = np.sort(order[:half]), np.sort(order[half:])
    return side_a, side_b


def split_subclusters(graph: SparseGraph, prior: Partition | None, m: int,
                      constrained: bool = True) -> list[list[int]]:
    """Bisect the largest live cluster until exactly m sub-clusters exist.

    Constrained mode starts from the prior partition, so every output
    sub-cluster stays inside one prior cluster; unconstrained mode starts
    from a single all-vertex cluster.
    """
    if constrained:
        if prior is None:
            raise ValidationError("constrained splitting requires a prior partition")
        live = [sorted(map(int, c)) for c in prior.clusters()]
    else:
        live = [list(range(graph.n))]
    if m < len(live):
        raise ValidationError(
            f"m={m} is below the {len(live)} starting clusters")
    if m > graph.n:
        raise ValidationError(f"m={m} exceeds the vertex count {graph.n}")

    while len(live) < m:
        sizes = [len(c) for c in live]
        target = int(np.argmax(sizes))  # first-index tie-break
        if sizes[target] <= 1:
            raise InfeasibleSplitError(
                f"cannot reach m={m}: largest cluster is a singleton")
        verts = np.array(live[target])
        sub = graph.weights[np.ix_(verts, verts)]
        loc_a, loc_b = _spectral_bisect(sub)
        part_a = sorted(int(v) for v in verts[loc_a])
        part_b = sorted(int(v) for v in verts[loc_b])
        if part_b[0] < part_a[0]:
            part_a, part_b = part_b, part_a
        live[target] = part_a
        live.append(part_b)
    return live


def _avg_weight(graph: SparseGraph, rows: Sequence[int], cols: Sequence[int]) -> float:
    # Average over all vertex pairs; absent edges contribute zero. fsum keeps
    # the value independent of enumeration order, bit for bit.
    block = graph.weights[np.ix_(rows, cols)]
    return math.fsum(block.ravel().tolist()) / block.size


def _intra(graph: SparseGraph, cluster: Sequence[int]) -> float:
    n = len(cluster)
    if n < 2:
        return 0.0
    block = graph.weights[np.ix_(cluster, cluster)]
    vals = block[np.triu_indices(n, 1)]
    return math.fsum(vals.tolist()) / (n * (n - 1) / 2)


def ris(graph: SparseGraph, Ci: Sequence[int], Cj: Sequence[int]) -> float:
    """Relative inter-cluster similarity of two disjoint vertex sets.

    Average cross-edge weight divided by the size-weighted average of the
    two intra-cluster averages. When both intra terms vanish the value is
    +inf if any cross edge exists and 0 otherwise.
    """
    Ci, Cj = list(Ci), list(Cj)
    if not Ci or not Cj:
        raise ValidationError("RIS needs nonempty clusters")
    if set(Ci) & set(Cj):
        raise ValidationError("RIS needs disjoint clusters")
    inter = _avg_weight(graph, Ci, Cj)
    ni, nj = len(Ci), len(Cj)
    denom = (ni * _intra(graph, Ci) + nj * _intra(graph, Cj)) / (ni + nj)
    if denom == 0.0:
        return math.inf if inter > 0 else 0.0
    return inter / denom


def merge_ris(subclusters: Sequence[Sequence[int]], graph: SparseGraph,
              K_target: int) -> tuple[Partition, MergeTrace]:
    """Greedily merge the max-RIS pair until K_target clusters remain.

    Ties break on the lowest (i, j) cluster-id pair; the merged cluster
    keeps the smaller id. The trace records the winning RIS at every step.
    """
    m = len(subclusters)
    if not 1 <= K_target <= m:
        raise ValidationError(f"need 1 <= K_target <= {m}, got {K_target}")
    live: dict[int, list[int]] = {c: sorted(map(int, cl)) for c, cl in enumerate(subclusters)}
    trace = MergeTrace(basic_subclusters=[list(live[c]) for c in sorted(live)])
    while len(live) > K_target:
        ids = sorted(live)
        best_pair = None
        best_val = -math.inf
        for a_pos, i in enumerate(ids):
            for j in ids[a_pos + 1:]:
                val = ris(graph, live[i], live[j])
                if val > best_val:
                    best_val, best_pair = val, (i, j)
        i, j = best_pair
        trace.steps.append(MergeStep(pair=(i, j), max_ris=best_val,
                                     k_after=len(live) - 1))
        live[i] = sorted(live[i] + live[j])
        del live[j]
    return _partition_from_clusters([live[c] for c in sorted(live)], graph.n), trace


def partition_at(trace: MergeTrace, K: int, n: int) -> Partition:
    """Replay the merge trace and return the partition with K clusters."""
    live: dict[int, list[int]] = {c: list(cl) for c, cl in enumerate(trace.basic_subclusters)}
    if len(live) == K:
        return _partition_from_clusters([live[c] for c in sorted(live)], n)
    for step in trace.steps:
        i, j = step.pair
        live[i] = sorted(live[i] + live[j])
        del live[j]
        if len(live) == K:
            return _partition_from_clusters([live[c] for c in sorted(live)], n)
    raise ValidationError(f"trace does not reach K={K}")


def _partition_from_clusters(clusters: Sequence[Sequence[int]], n: int) -> Partition:
    assignment = np.full(n, -1, dtype=int)
    for k, cl in enumerate(clusters):
        assignment[list(cl)] = k
    if np.any(assignment < 0):
        raise ValidationError("clusters do not cover all vertices")
    part = Partition(assignment=assignment, K=len(clusters))
    part.validate()
    return part


def select_K(trace: MergeTrace, m: int, f: float = DEFAULT_F,
             eta: float = DEFAULT_ETA, max_relax: int = MAX_RELAX) -> int:
    """Pick the cluster count where Max_RIS drops abnormally.

    Max_RIS(K) is the winning RIS of the merge that enters the K-cluster
    state. The baseline is the mean reciprocal Max_RIS over K in [m/2, m].
    Scanning K downward from m/2 - 1, the first K whose reciprocal reaches
    f times the baseline marks the drop (the merge entering K was bad) and
    the preceding K is returned. If nothing triggers, the threshold is
    relaxed to f/eta^i for i = 1, 2, ...; once the multiplier falls to 1
    (every K would trigger, so nothing stands out) or after ``max_relax``
    relaxations, K = m/2 - 1 is returned with a warning.
    """
    by_k = trace.max_ris_by_k()
    for k in range(1, m):
        if k not in by_k:
            raise ValidationError(f"trace does not cover K={k}; merge down to 1 first")

    def recip(k: int) -> float:
        v = by_k[k]
        if v == 0.0:
            return math.inf
        if math.isinf(v):
            return 0.0
        return 1.0 / v

    half = m // 2
    fallback = max(1, half - 1)
    baseline_keys = [k for k in range(max(half, 1), m)]
    baseline = float(np.mean([recip(k) for k in baseline_keys]))
    scan_keys = [k for k in range(half - 1, 0, -1)]
    for i in range(max_relax + 1):
        mult = f / eta**i
        if mult <= 1.0:
            logger.warning("select_K: no abnormal Max_RIS drop for m=%d; "
                           "returning %d", m, fallback)
            return fallback
        for k in scan_keys:
            if recip(k) >= mult * baseline:
                return k + 1
    logger.warning("select_K: relaxation cap reached for m=%d; returning %d",
                   m, fallback)
    return fallback


def random_partition(I: int, K: int, seed: int) -> Partition:
    """Seeded random partition with every cluster nonempty.

    A random permutation seeds each cluster with one vertex; the remaining
    vertices are assigned uniformly at random.
    """
    if not 1 <= K <= I:
        raise ValidationError(f"need 1 <= K <= {I}, got K={K}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(I)
    assignment = np.empty(I, dtype=int)
    assignment[perm[:K]] = np.arange(K)
    if I > K:
        assignment[perm[K:]] = rng.integers(0, K, size=I - K)
    part = Partition(assignment=assignment, K=K)
    part.validate()
    return part


def cluster_characteristics(sim: SimilarityMatrix, prior: Partition | None,
                            params: HyperParams, constrained: bool = True,
                            ) -> tuple[Partition, MergeTrace, int]:
    """Run sparsify -> split -> merge -> select_K for one (knn, m) cell.

    Returns the partition at the automatically selected K, the full merge
    trace (down to one cluster) and the selected K.
    """
    graph = knn_sparsify(sim, params.knn)
    subs = split_subclusters(graph, prior, params.m, constrained=constrained)
    _, trace = merge_ris(subs, graph, 1)
    K = select_K(trace, params.m, params.f, params.eta)
    partition = partition_at(trace, K, graph.n)
    return partition, trace, K


def _grid_cell(args) -> tuple[int, int, float, Partition | None, int]:
    """Score one (m, knn) cell by the training tangency Sharpe ratio."""
    from .evaluation import tangency_backtest
    from .factor_model import fit, restriction_mask_from_partition

    (m, knn, sim, prior, constrained, f, eta, include_zc, Z, returns, weights,
     tangency_burn_in, fit_tol, fit_max_iter) = args
    try:
        params = HyperParams(knn=knn, m=m, K=1, f=f, eta=eta)
        partition, _, K = cluster_characteristics(sim, prior, params, constrained)
        mask = restriction_mask_from_partition(partition, include_zc=include_zc)
        model = fit(Z, returns, weights, mask, tol=fit_tol, max_iter=fit_max_iter)
        result = tangency_backtest(model.factors, burn_in=tangency_burn_in)
        return m, knn, result.sharpe, partition, K
    except CipcaError as exc:
        logger.warning("grid cell (m=%d, knn=%d) failed: %s", m, knn, exc)
        return m, knn, -math.inf, None, 0


def grid_search(panel: CharacteristicPanel, prior: Partition | None,
                knn_grid: Sequence[int], m_grid: Sequence[int], *,
                scheme: str = "value", price_floor: float = 5.0,
                f: float = DEFAULT_F, eta: float = DEFAULT_ETA,
                constrained: bool = True, include_zc: bool = True,
                tangency_burn_in: int = 60, fit_tol: float = 1e-8,
                fit_max_iter: int = 1000, jobs: int = 1,
                ) -> tuple[HyperParams, Partition]:
    """Pick (m, knn) maximizing the training-sample tangency Sharpe ratio.

    Each cell clusters, selects K, fits the restricted factor model on the
    supplied (training) panel and scores the expanding-window tangency
    portfolio of its factor series. Ties break toward smaller m, then
    smaller knn; cells that fail score -inf.
    """
    if not knn_grid or not m_grid:
        raise ValidationError("hyperparameter grids must be nonempty")
    ranks = rank_transform(panel)
    weights = build_weights(panel, scheme, price_floor)
    sim = similarity_matrix(ranks, weights)
    Z = standardize(panel)
    cells = [(m, knn, sim, prior, constrained, f, eta, include_zc, Z,
              panel.returns, weights, tangency_burn_in, fit_tol, fit_max_iter)
             for m in sorted(m_grid) for knn in sorted(knn_grid)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_cell, cells))
    else:
        results = [_grid_cell(c) for c in cells]
    best = None
    for m, knn, sharpe, partition, K in results:
        if partition is not None and (best is None or sharpe > best[2]):
            best = (m, knn, sharpe, partition, K)
    if best is None:
        raise ValidationError("every grid cell failed")
    m, knn, _, partition, K = best
    return HyperParams(knn=knn, m=m, K=K, f=f, eta=eta), partition
