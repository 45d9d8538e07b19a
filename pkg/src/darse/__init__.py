"""Rank-space exploration for budget-constrained low-rank adapters."""

from .errors import (
    CapExceededError,
    DarseError,
    DegenerateInputError,
    EvaluatorError,
    InfeasibleBudgetError,
    InvalidInputError,
    InvalidRankError,
    NumericFailureError,
)
from .importance import FitConfig, allocate_ranks, fit_low_rank, importance_score, importance_vector
from .lowrank import (
    LayerSpec,
    LowRankFactors,
    make_layers,
    param_count,
    reconstruction_error,
    singular_values,
    svd,
    truncated_factorization,
)
from .objectives import (
    MatrixFitObjective,
    MultiTaskWeights,
    ObjectiveEvaluator,
    ScriptedObjective,
    SpectralTailObjective,
    map_score_to_class,
)
from .oracle import OracleResult, brute_force_search, dp_separable_search
from .search import ExplorationHistory, RankSpace, SearchConfig, coarse_search, explore, fine_search

__version__ = "0.1.0"
