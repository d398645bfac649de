"""Fair ranking toolkit.

Three layers: a statistical re-ranker that enforces a minimum protected
presence in every ranking prefix, a listwise learning-to-rank trainer with
a disparate-exposure penalty, and a small BM25 search service whose wire
protocol supports both as rescorers.
"""

from .deltr import (
    DeltrModel,
    ExperimentRow,
    FeatureVector,
    FitResult,
    QueryDocs,
    TrainConfig,
    deltr_gradient,
    deltr_loss,
    disparate_exposure,
    exposure,
    fit,
    generate_synthetic,
    listnet_loss,
    predict,
    run_gamma_experiment,
    top_one_probabilities,
    train,
)
from .errors import FeatureError, ParseError, TrainingDivergedError
from .fair_rerank import (
    Candidate,
    FairnessParams,
    MTable,
    ReRankResult,
    adjust_alpha,
    binomial_cdf,
    compute_fail_probability,
    construct_mtable,
    fair_rerank,
    is_fair,
    mtable_from_record,
    mtable_key,
    mtable_to_record,
    required_protected,
)
from .search_index import Document, ScoredHit, SearchIndex, extract_features
from .service import RescoreEngine, create_server

__version__ = "0.1.0"
