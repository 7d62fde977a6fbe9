"""Rank selection for low-rank vision transformers by one-shot architecture search.

The package factorises each linear layer of a small vision transformer with a
truncated SVD, trains a weight-sharing supernet over per-layer rank choices,
prunes each block's local candidates by an accuracy/cost score and runs an
evolutionary search under a FLOPs window. Everything is plain numpy.
"""
from .cost import CostReport, FlopsWindow, breakeven_rank, cost_of, satisfies
from .data import Dataset, DatasetSpec, DatasetSplit, generate, make_splits
from .errors import (ConfigError, DependencyError, InfeasibleWindowError, LowRankNASError, NumericError,
                     ShapeError)
from .filtering import FilterConfig, PrecisionCostScore, RetainedSpace, filter_model, precision_cost_ratio
from .linalg import SvdResult, svd, tail_error, truncate
from .search import EAConfig, SearchResult, search
from .supernet import (LowRankFactorPair, RankChoiceSet, RankConfig, SamplerDistribution, Supernet,
                       build_supernet, default_choice_sets, train_supernet)
from .vit import Model, ModelConfig, build_model, evaluate, fit

__all__ = [
    "CostReport", "FlopsWindow", "breakeven_rank", "cost_of", "satisfies",
    "Dataset", "DatasetSpec", "DatasetSplit", "generate", "make_splits",
    "ConfigError", "DependencyError", "InfeasibleWindowError", "LowRankNASError", "NumericError", "ShapeError",
    "FilterConfig", "PrecisionCostScore", "RetainedSpace", "filter_model", "precision_cost_ratio",
    "SvdResult", "svd", "tail_error", "truncate",
    "EAConfig", "SearchResult", "search",
    "LowRankFactorPair", "RankChoiceSet", "RankConfig", "SamplerDistribution", "Supernet",
    "build_supernet", "default_choice_sets", "train_supernet",
    "Model", "ModelConfig", "build_model", "evaluate", "fit",
]
