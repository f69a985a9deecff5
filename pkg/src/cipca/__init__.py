"""Cluster-restricted instrumented-PCA factor models.

Pipeline: load a characteristic/return panel, measure pairwise
characteristic similarity from weighted rank correlations, refine a prior
grouping by constrained split-and-merge clustering, estimate the restricted
factor model by alternating least squares, realize rolling out-of-sample
factor returns, and evaluate tangency portfolios with ordered or Bayesian
factor-subset selection.
"""

from .bayes import (
    ModelPosterior,
    ModelSpec,
    PriorSpec,
    enumerate_models,
    estimate_prior,
    log_marginal,
    max_squared_sharpe,
    posterior_rank,
)
from .clustering import (
    HyperParams,
    MergeStep,
    MergeTrace,
    Partition,
    SparseGraph,
    cluster_characteristics,
    grid_search,
    knn_sparsify,
    merge_ris,
    partition_at,
    partition_from_frame,
    random_partition,
    ris,
    select_K,
    split_subclusters,
)
from .embedding import Embedding, mds_embed
from .errors import (
    CipcaError,
    ConfigError,
    DegenerateColumnError,
    DomainError,
    EmptyMonthError,
    EstimationError,
    InfeasibleSplitError,
    ParseError,
    RankDeficiencyError,
    UndefinedCorrelationError,
    ValidationError,
)
from .evaluation import (
    AlphaReport,
    FactorStats,
    OrderedSelection,
    TangencyResult,
    alpha_regression,
    default_nw_lags,
    factor_stats,
    max_drawdown,
    ordered_selection,
    tangency_backtest,
    tangency_weights,
)
from .factor_model import (
    FactorReturnSeries,
    FittedModel,
    RestrictionMask,
    factor_weights,
    fit,
    oos_factor_returns,
    realize_factors,
    restriction_mask_from_partition,
)
from .panel import (
    CharacteristicPanel,
    InstrumentMatrix,
    PanelSchema,
    RankPanel,
    WeightSeries,
    build_weights,
    load_panel,
    rank_transform,
    standardize,
)
from .similarity import (
    DistanceMatrix,
    SimilarityMatrix,
    rank_correlation,
    similarity_matrix,
    to_distance,
)

__version__ = "0.1.0"
