"""Fairness-aware listwise learning to rank.

A linear scoring model is trained with the listwise cross-entropy loss
(top-one probability model) plus a one-sided penalty on the exposure gap
between the non-protected and the protected group.  Exposure of a group
is the mean probability of its members to occupy the top position under
the exponential score model; the penalty is the squared positive part of
(non-protected exposure - protected exposure), so rankings that already
favour the protected group are left alone.

The total objective per query is  relevance_loss + gamma * exposure_penalty,
minimized by full-batch gradient descent with a fixed learning rate.
Features (the protected indicator included) are z-scored over the training
set; the standardization parameters are stored in the model so prediction
is self-contained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import TrainingDivergedError

__all__ = [
    "FeatureVector",
    "QueryDocs",
    "DeltrModel",
    "TrainConfig",
    "FitResult",
    "ExperimentRow",
    "top_one_probabilities",
    "exposure",
    "disparate_exposure",
    "listnet_loss",
    "deltr_loss",
    "deltr_gradient",
    "train",
    "fit",
    "predict",
    "generate_synthetic",
    "run_gamma_experiment",
]


@dataclass(frozen=True)
class FeatureVector:
    """One document: protected indicator (the first model input) + features."""

    doc_id: str
    protected: float
    features: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(float(v) for v in self.features))
        if self.protected not in (0.0, 1.0):
            raise ValueError(
                f"protected indicator must be 0 or 1, got {self.protected}"
            )
        if not all(math.isfinite(v) for v in self.features):
            raise ValueError(f"document {self.doc_id!r} has non-finite features")


@dataclass(frozen=True)
class QueryDocs:
    """All documents of one training query with their relevance judgments."""

    query_id: str
    docs: tuple[FeatureVector, ...]
    judgments: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "docs", tuple(self.docs))
        object.__setattr__(
            self, "judgments", tuple(float(j) for j in self.judgments)
        )
        if len(self.docs) != len(self.judgments):
            raise ValueError(
                f"query {self.query_id!r}: {len(self.docs)} docs vs "
                f"{len(self.judgments)} judgments"
            )
        if len(self.docs) < 2:
            raise ValueError(f"query {self.query_id!r} needs at least 2 documents")
        if not all(math.isfinite(j) for j in self.judgments):
            raise ValueError(f"query {self.query_id!r} has non-finite judgments")
        dims = {len(d.features) for d in self.docs}
        if len(dims) > 1:
            raise ValueError(f"query {self.query_id!r} mixes feature dimensions")


@dataclass(eq=False)
class DeltrModel:
    """Learned linear weights plus the standardization applied at training.

    ``weights[0]`` multiplies the protected indicator; ``standardization``
    holds one (mean, stddev) pair per weight, with stddev already replaced
    by 1.0 for constant columns.
    """

    weights: np.ndarray
    feature_names: tuple[str, ...]
    gamma: float
    standardization: tuple[tuple[float, float], ...]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.feature_names = tuple(self.feature_names)
        self.standardization = tuple(
            (float(m), float(s)) for m, s in self.standardization
        )
        if self.weights.ndim != 1:
            raise ValueError("weights must be a vector")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        if len(self.feature_names) != self.weights.size:
            raise ValueError(
                f"{len(self.feature_names)} feature names for "
                f"{self.weights.size} weights"
            )
        if len(self.standardization) != self.weights.size:
            raise ValueError("one standardization pair per weight required")
        if any(s <= 0.0 for _, s in self.standardization):
            raise ValueError("standardization stddev must be positive")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.0
    learning_rate: float = 0.1
    iterations: int = 500
    seed: int = 42
    init_scale: float = 0.01

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.init_scale <= 0.0:
            raise ValueError("init_scale must be positive")


@dataclass
class FitResult:
    """Trained model plus the per-iteration loss trajectory.

    Each trajectory row is (relevance, fairness, total) averaged over
    queries; row i is evaluated at the weights before step i, and a final
    row is appended for the returned weights.
    """

    model: DeltrModel
    trajectory: list[tuple[float, float, float]] = field(default_factory=list)


def top_one_probabilities(scores) -> np.ndarray:
    """Probability of each item to rank first under the exponential model.

    Max-shifted softmax: positive entries summing to one, stable for
    arbitrarily large scores.
    """
    s = np.asarray(scores, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a non-empty vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    e = np.exp(s - s.max())
    return e / e.sum()


def exposure(group_member_flags, top_probs) -> float:
    """Mean top-one probability over the flagged positions; 0 if none."""
    flags = np.asarray(group_member_flags, dtype=bool)
    probs = np.asarray(top_probs, dtype=float)
    if flags.shape != probs.shape:
        raise ValueError(
            f"length mismatch: {flags.shape[0]} flags vs {probs.shape[0]} probs"
        )
    if not flags.any():
        return 0.0
    return float(probs[flags].mean())


def disparate_exposure(protected_flags, top_probs) -> float:
    """Squared positive part of the exposure gap, non-protected minus protected."""
    flags = np.asarray(protected_flags, dtype=bool)
    gap = exposure(~flags, top_probs) - exposure(flags, top_probs)
    return float(max(0.0, gap) ** 2)


def _log_top_one(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max()
    return z - math.log(np.exp(z).sum())


def listnet_loss(judgments, predicted_scores) -> float:
    """Cross entropy between the top-one distributions of both score lists."""
    y = np.asarray(judgments, dtype=float)
    s = np.asarray(predicted_scores, dtype=float)
    if y.shape != s.shape:
        raise ValueError(
            f"length mismatch: {y.shape[0]} judgments vs {s.shape[0]} predictions"
        )
    p_y = top_one_probabilities(y)
    return float(-(p_y * _log_top_one(s)).sum())


def _protected_flags(query: QueryDocs) -> np.ndarray:
    return np.array([d.protected == 1.0 for d in query.docs], dtype=bool)


def _design_matrix(query: QueryDocs) -> np.ndarray:
    return np.array([(d.protected, *d.features) for d in query.docs], dtype=float)


def deltr_loss(
    query: QueryDocs, model_scores, gamma: float
) -> tuple[float, float, float]:
    """Total, relevance and fairness parts of the objective for one query."""
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    s = np.asarray(model_scores, dtype=float)
    if s.shape != (len(query.docs),):
        raise ValueError(
            f"expected {len(query.docs)} scores, got {s.shape}"
        )
    relevance = listnet_loss(query.judgments, s)
    fairness = disparate_exposure(_protected_flags(query), top_one_probabilities(s))
    return relevance + gamma * fairness, relevance, fairness


def _group_contrast(flags: np.ndarray) -> np.ndarray:
    """Per-position coefficients turning top-one probs into the exposure gap."""
    c = np.zeros(flags.size)
    n0 = int((~flags).sum())
    n1 = int(flags.sum())
    if n0:
        c[~flags] = 1.0 / n0
    if n1:
        c[flags] -= 1.0 / n1
    return c


def _gradient(
    X: np.ndarray,
    flags: np.ndarray,
    p_y: np.ndarray,
    weights: np.ndarray,
    gamma: float,
) -> np.ndarray:
    p_hat = top_one_probabilities(X @ weights)
    grad = X.T @ (p_hat - p_y)
    if gamma > 0.0:
        c = _group_contrast(flags)
        gap = float(c @ p_hat)
        if gap > 0.0:
            grad = grad + gamma * (2.0 * gap) * (X.T @ (p_hat * (c - gap)))
    return grad


def deltr_gradient(query: QueryDocs, weights, gamma: float) -> np.ndarray:
    """Analytic gradient of the per-query objective with respect to the weights.

    The penalty term is clamped: when the protected group's exposure is
    at least the non-protected group's, it contributes exactly zero.
    """
    if gamma < 0.0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    w = np.asarray(weights, dtype=float)
    X = _design_matrix(query)
    if w.shape != (X.shape[1],):
        raise ValueError(
            f"weight dimension {w.shape} does not match {X.shape[1]} model inputs"
        )
    p_y = top_one_probabilities(np.asarray(query.judgments, dtype=float))
    return _gradient(X, _protected_flags(query), p_y, w, gamma)


def _loss_parts(
    X: np.ndarray,
    flags: np.ndarray,
    p_y: np.ndarray,
    weights: np.ndarray,
    gamma: float,
) -> tuple[float, float, float]:
    s = X @ weights
    relevance = float(-(p_y * _log_top_one(s)).sum())
    p_hat = top_one_probabilities(s)
    gap = float(_group_contrast(flags) @ p_hat)
    fairness = max(0.0, gap) ** 2
    return relevance + gamma * fairness, relevance, fairness


def _default_names(n_features: int) -> tuple[str, ...]:
    return ("protected",) + tuple(f"feature_{i}" for i in range(1, n_features + 1))


def fit(data, config: TrainConfig, feature_names=None) -> FitResult:
    """Train a model and keep the loss trajectory.

    Full-batch gradient descent: each step averages the per-query gradients
    (fixed order) and takes one fixed-size step.  Raises
    TrainingDivergedError naming the iteration if the loss or the weights
    stop being finite.
    """
    queries = list(data)
    if not queries:
        raise ValueError("training data is empty")
    n_features = len(queries[0].docs[0].features)
    for q in queries:
        if len(q.docs[0].features) != n_features:
            raise ValueError(
                f"query {q.query_id!r} has a different feature dimension"
            )
    if feature_names is None:
        feature_names = _default_names(n_features)
    feature_names = tuple(feature_names)
    dim = 1 + n_features
    if len(feature_names) != dim:
        raise ValueError(f"expected {dim} feature names, got {len(feature_names)}")

    raw = [_design_matrix(q) for q in queries]
    stacked = np.vstack(raw)
    means = stacked.mean(axis=0)
    stds = stacked.std(axis=0)
    divisors = np.where(stds > 0.0, stds, 1.0)
    Xs = [(X - means) / divisors for X in raw]
    flags = [_protected_flags(q) for q in queries]
    p_ys = [
        top_one_probabilities(np.asarray(q.judgments, dtype=float)) for q in queries
    ]

    rng = np.random.default_rng(config.seed)
    w = rng.uniform(-config.init_scale, config.init_scale, size=dim)
    gamma = config.gamma
    trajectory: list[tuple[float, float, float]] = []

    def record(weights: np.ndarray, iteration: int) -> None:
        try:
            parts = [
                _loss_parts(X, f, p_y, weights, gamma)
                for X, f, p_y in zip(Xs, flags, p_ys)
            ]
        except ValueError:
            # overflowing scores surface as a non-finite-input error
            raise TrainingDivergedError(iteration) from None
        # rows are (relevance, fairness, total)
        row = tuple(float(np.mean([p[j] for p in parts])) for j in (1, 2, 0))
        if not all(math.isfinite(v) for v in row):
            raise TrainingDivergedError(iteration)
        trajectory.append(row)

    for it in range(config.iterations):
        record(w, it)
        grads = np.stack(
            [_gradient(X, f, p_y, w, gamma) for X, f, p_y in zip(Xs, flags, p_ys)]
        )
        w = w - config.learning_rate * grads.mean(axis=0)
        if not np.all(np.isfinite(w)):
            raise TrainingDivergedError(it, "weights are not finite")
    record(w, config.iterations)

    model = DeltrModel(
        weights=w,
        feature_names=feature_names,
        gamma=gamma,
        standardization=tuple(zip(means.tolist(), divisors.tolist())),
    )
    return FitResult(model=model, trajectory=trajectory)


def train(data, config: TrainConfig, feature_names=None) -> DeltrModel:
    """Like ``fit`` but returns only the model."""
    return fit(data, config, feature_names).model


def predict(model: DeltrModel, docs) -> tuple[np.ndarray, list[str]]:
    """Scores (input order) and the ranking of doc ids, best first.

    Applies the model's stored standardization before the dot product.
    Ties are broken lexicographically by doc id.
    """
    docs = list(docs)
    if not docs:
        raise ValueError("no documents to score")
    X = np.array([(d.protected, *d.features) for d in docs], dtype=float)
    if X.shape[1] != model.weights.size:
        raise ValueError(
            f"documents have {X.shape[1]} model inputs, model expects "
            f"{model.weights.size}"
        )
    means = np.array([m for m, _ in model.standardization])
    stds = np.array([s for _, s in model.standardization])
    scores = ((X - means) / stds) @ model.weights
    order = sorted(range(len(docs)), key=lambda i: (-scores[i], docs[i].doc_id))
    return scores, [docs[i].doc_id for i in order]


def generate_synthetic(n: int, protected_first: bool, seed: int) -> QueryDocs:
    """Two-group dataset with non-overlapping score intervals.

    Half the items are protected.  The advantaged half draws its single
    score feature uniformly from [0.5, 1.0), the disadvantaged half from
    [0.0, 0.5); ``protected_first`` selects which group is advantaged.
    Documents are ordered by decreasing score and judgments are the
    linearly descending normalized ranks (1 for the top item, 0 for the
    last).
    """
    if n < 2 or n % 2 != 0:
        raise ValueError(f"n must be even and >= 2, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    high = rng.uniform(0.5, 1.0, size=half)
    low = rng.uniform(0.0, 0.5, size=half)
    protected_scores = high if protected_first else low
    items = [
        FeatureVector(f"p{i:02d}", 1.0, (float(protected_scores[i]),))
        for i in range(half)
    ]
    other_scores = low if protected_first else high
    items += [
        FeatureVector(f"n{i:02d}", 0.0, (float(other_scores[i]),))
        for i in range(half)
    ]
    items.sort(key=lambda d: (-d.features[0], d.doc_id))
    judgments = [(n - 1 - r) / (n - 1) for r in range(n)]
    return QueryDocs("synthetic", tuple(items), tuple(judgments))


@dataclass(frozen=True)
class ExperimentRow:
    gamma: float
    exposure_gap: float
    avg_protected_position: float
    final_loss: float
    ranking: tuple[str, ...]


def run_gamma_experiment(
    gammas, protected_first: bool, seed: int, config: TrainConfig, n: int = 50
) -> list[ExperimentRow]:
    """Train one model per gamma on the same synthetic dataset.

    Reports, per gamma, the positive exposure gap of the predictions, the
    mean 1-based rank of the protected items, the final training loss and
    the predicted ranking itself.
    """
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise ValueError("no gamma values given")
    if any(g < 0.0 for g in gammas):
        raise ValueError("gamma values must be >= 0")
    query = generate_synthetic(n, protected_first, seed)
    flags = _protected_flags(query)
    rows = []
    for g in gammas:
        result = fit([query], replace(config, gamma=g))
        scores, ranking = predict(result.model, query.docs)
        probs = top_one_probabilities(scores)
        gap = max(0.0, exposure(~flags, probs) - exposure(flags, probs))
        position = {doc_id: i + 1 for i, doc_id in enumerate(ranking)}
        avg_pos = float(
            np.mean(
                [position[d.doc_id] for d in query.docs if d.protected == 1.0]
            )
        )
        rows.append(
            ExperimentRow(
                gamma=g,
                exposure_gap=float(gap),
                avg_protected_position=avg_pos,
                final_loss=result.trajectory[-1][2],
                ranking=tuple(ranking),
            )
        )
    return rows
