"""Relevance scoring backends.

Every backend emits a probability simplex over (exact, substitute,
irrelevant) for a (query, product) pair. Three interchangeable scorers back
the labeling pipeline: a ground-truth oracle, a file of precomputed scores,
and a trainable surrogate. The surrogate is a linear-softmax classifier over
early-interaction features of the pair (token overlap, product-type match,
attribute hits, length ratio), trained on judgment data with plain
fixed-step gradient descent; prediction is pure and thread-safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .catalog import JudgmentRecord, PTPrediction, Product, Query, RELEVANCE_CLASSES
from .mining import token_overlap_fraction

FEATURE_NAMES = ("token_overlap", "pt_match", "attr_match_count", "title_len_ratio", "bias")
RRM_PARAMS_VERSION = 1


@dataclass(frozen=True)
class RelevanceProbs:
    pE: float
    pS: float
    pI: float

    def __post_init__(self):
        total = self.pE + self.pS + self.pI
        for name, value in (("pE", self.pE), ("pS", self.pS), ("pI", self.pI)):
            if not -1e-12 <= value <= 1.0 + 1e-12:
                raise ValueError(f"{name} = {value} outside [0, 1]")
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1 within 1e-9, got {total}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.pE, self.pS, self.pI)

    @property
    def argmax_class(self) -> str:
        return RELEVANCE_CLASSES[int(np.argmax(self.as_tuple()))]


@dataclass(frozen=True)
class CrossFeatures:
    token_overlap: float
    pt_match: float
    attr_match_count: int
    title_len_ratio: float
    bias: float = 1.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.token_overlap, self.pt_match, float(self.attr_match_count), self.title_len_ratio, self.bias]
        )


def featurize(query: Query, product: Product, relevant_pts: Iterable[str] = ()) -> CrossFeatures:
    """Deterministic pair features.

    ``relevant_pts`` is the query's predicted relevant product-type set
    (queries carry no type of their own); ``attr_match_count`` counts
    attributes whose value tokens all appear in the query text.
    """
    query_tokens = set(query.text.lower().split())
    overlap = token_overlap_fraction(query.text, product.title)
    pt_match = 1.0 if product.product_type in set(relevant_pts) else 0.0
    attr_matches = 0
    for value in product.attributes.values():
        value_tokens = value.lower().split()
        if value_tokens and set(value_tokens) <= query_tokens:
            attr_matches += 1
    title_len_ratio = len(product.title.split()) / max(1, len(query.text.split()))
    return CrossFeatures(
        token_overlap=overlap,
        pt_match=pt_match,
        attr_match_count=attr_matches,
        title_len_ratio=title_len_ratio,
    )


class CrossFeaturizer(BaseEstimator, TransformerMixin):
    """Builds the feature matrix for (query, product) pairs.

    ``fit`` ingests per-query PT predictions, which supply the relevant-PT
    set used by the ``pt_match`` feature.
    """

    def fit(self, pt_predictions: Iterable[PTPrediction], y=None) -> "CrossFeaturizer":
        self.relevant_pts_: dict[str, set[str]] = {p.query_id: p.product_types for p in pt_predictions}
        return self

    def features_for(self, query: Query, product: Product) -> CrossFeatures:
        if not hasattr(self, "relevant_pts_"):
            raise NotFittedError("CrossFeaturizer is not fitted; call fit(pt_predictions) first")
        return featurize(query, product, self.relevant_pts_.get(query.id, ()))

    def transform(self, pairs: Sequence[tuple[Query, Product]]) -> np.ndarray:
        return np.array([self.features_for(q, p).as_array() for q, p in pairs])


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def rrm_predict(weights: np.ndarray, feats: CrossFeatures) -> RelevanceProbs:
    """Softmax over the three linear logits for one pair."""
    weights = np.asarray(weights, dtype=float)
    if not np.all(np.isfinite(weights)):
        raise ValueError("weight matrix must be finite")
    probs = _softmax_rows(weights @ feats.as_array())
    return RelevanceProbs(pE=float(probs[0]), pS=float(probs[1]), pI=float(probs[2]))


def cross_entropy_and_grad(
    weights: np.ndarray, X: np.ndarray, Y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean multi-class cross-entropy and its gradient w.r.t. the weights.

    ``Y`` is one-hot (n, 3). Exposed separately so the gradient can be
    checked against finite differences.
    """
    logits = X @ weights.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(np.sum(Y * log_probs)) / len(X)
    grad = (np.exp(log_probs) - Y).T @ X / len(X)
    return loss, grad


class RelevanceRewardModel(BaseEstimator, ClassifierMixin):
    """Linear-softmax relevance classifier over pair cross-features.

    Weights start at zero and are trained with full-batch gradient descent
    at a fixed step, which keeps runs bit-reproducible; the 3 x 5 parameter
    space needs nothing fancier.
    """

    def __init__(self, learning_rate: float = 0.05, epochs: int = 800, seed: int = 0):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def fit(self, X: np.ndarray, y: Sequence[str]) -> "RelevanceRewardModel":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        present = set(y.tolist())
        missing = [k for k in RELEVANCE_CLASSES if k not in present]
        if missing:
            raise ValueError(f"training data must contain every class; missing {missing}")
        self.classes_ = np.array(RELEVANCE_CLASSES)
        class_index = {k: i for i, k in enumerate(RELEVANCE_CLASSES)}
        Y = np.zeros((len(y), 3))
        Y[np.arange(len(y)), [class_index[k] for k in y]] = 1.0
        weights = np.zeros((3, X.shape[1]))
        curve = []
        for _ in range(self.epochs):
            loss, grad = cross_entropy_and_grad(weights, X, Y)
            curve.append(loss)
            weights -= self.learning_rate * grad
        final_loss, _ = cross_entropy_and_grad(weights, X, Y)
        curve.append(final_loss)
        self.weights_ = weights
        self.loss_curve_ = curve
        return self

    def _check_fitted(self) -> np.ndarray:
        if not hasattr(self, "weights_"):
            raise NotFittedError("RelevanceRewardModel is not fitted")
        return self.weights_

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        weights = self._check_fitted()
        return _softmax_rows(np.asarray(X, dtype=float) @ weights.T)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class RelevanceScorer(Protocol):
    """Anything that can attach class probabilities to a pair."""

    def score(self, query: Query, product: Product) -> RelevanceProbs:  # pragma: no cover
        ...


class OracleScorer:
    """Ground-truth-backed scorer with tunable concentration.

    The true class receives mass ``sharpness / (sharpness + 2)`` and each
    other class ``1 / (sharpness + 2)``; ``sharpness=math.inf`` yields a
    one-hot simplex. Raises on pairs the ground truth does not cover.
    """

    def __init__(self, ground_truth, sharpness: float = math.inf):
        if sharpness < 1:
            raise ValueError(f"sharpness must be >= 1, got {sharpness}")
        self.ground_truth = ground_truth
        self.sharpness = sharpness

    def score(self, query: Query, product: Product) -> RelevanceProbs:
        klass = self.ground_truth.relevance(query.id, product.id)
        if math.isinf(self.sharpness):
            main, rest = 1.0, 0.0
        else:
            main = self.sharpness / (self.sharpness + 2.0)
            rest = 1.0 / (self.sharpness + 2.0)
        values = {k: rest for k in RELEVANCE_CLASSES}
        values[klass] = main
        return RelevanceProbs(pE=values["Exact"], pS=values["Substitute"], pI=values["Irrelevant"])


class SurrogateScorer:
    """Featurize-and-predict scorer wrapping the trained surrogate."""

    def __init__(self, model: RelevanceRewardModel, featurizer: CrossFeaturizer):
        self.model = model
        self.featurizer = featurizer

    def score(self, query: Query, product: Product) -> RelevanceProbs:
        feats = self.featurizer.features_for(query, product)
        return rrm_predict(self.model._check_fitted(), feats)

    def score_many(self, pairs: Sequence[tuple[Query, Product]]) -> list[RelevanceProbs]:
        probs = self.model.predict_proba(self.featurizer.transform(pairs))
        return [RelevanceProbs(pE=float(a), pS=float(b), pI=float(c)) for a, b, c in probs]


class PrecomputedScorer:
    """Scorer backed by a file of batch-inference scores."""

    def __init__(self, scores: dict[tuple[str, str], RelevanceProbs]):
        self.scores = scores

    def score(self, query: Query, product: Product) -> RelevanceProbs:
        key = (query.id, product.id)
        if key not in self.scores:
            raise KeyError(f"no precomputed score for pair {key}")
        return self.scores[key]


def train_rrm(
    judgments: Sequence[JudgmentRecord],
    queries: Sequence[Query],
    products: Sequence[Product],
    pt_predictions: Sequence[PTPrediction],
    learning_rate: float = 0.05,
    epochs: int = 800,
    seed: int = 0,
) -> tuple[RelevanceRewardModel, CrossFeaturizer]:
    """Fit the surrogate on judgment rows; returns (model, featurizer)."""
    queries_by_id = {q.id: q for q in queries}
    products_by_id = {p.id: p for p in products}
    featurizer = CrossFeaturizer().fit(pt_predictions)
    pairs = [(queries_by_id[j.query_id], products_by_id[j.product_id]) for j in judgments]
    X = featurizer.transform(pairs)
    y = [j.klass for j in judgments]
    model = RelevanceRewardModel(learning_rate=learning_rate, epochs=epochs, seed=seed).fit(X, y)
    return model, featurizer


def suggest_revision_thresholds(irrelevant_exact_probs: np.ndarray) -> tuple[float, float]:
    """Recalibration helper: the 90th/95th percentiles of the exact-match
    probability over irrelevant-class pairs, the percentile rule used for
    the default 0.3/0.7 thresholds."""
    arr = np.asarray(irrelevant_exact_probs, dtype=float)
    if arr.size == 0:
        raise ValueError("need at least one irrelevant-class probability")
    p90, p95 = np.percentile(arr, [90.0, 95.0])
    return float(p90), float(p95)


def save_rrm_params(model: RelevanceRewardModel, path: str | Path) -> None:
    payload = {
        "version": RRM_PARAMS_VERSION,
        "feature_schema": list(FEATURE_NAMES),
        "weights": model._check_fitted().tolist(),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_rrm_params(path: str | Path) -> RelevanceRewardModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != RRM_PARAMS_VERSION:
        raise ValueError(f"unsupported rrm params version {payload.get('version')!r}")
    if tuple(payload.get("feature_schema", ())) != FEATURE_NAMES:
        raise ValueError("feature schema mismatch")
    model = RelevanceRewardModel()
    model.classes_ = np.array(RELEVANCE_CLASSES)
    model.weights_ = np.array(payload["weights"], dtype=float)
    if model.weights_.shape != (3, len(FEATURE_NAMES)):
        raise ValueError(f"weight matrix must be 3x{len(FEATURE_NAMES)}")
    return model


def save_scores(rows: Iterable[tuple[str, str, RelevanceProbs]], path: str | Path) -> None:
    """Persist batch inference as JSONL rows (query_id, product_id, probs)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for query_id, product_id, probs in rows:
            fh.write(
                json.dumps(
                    {
                        "query_id": query_id,
                        "product_id": product_id,
                        "pE": probs.pE,
                        "pS": probs.pS,
                        "pI": probs.pI,
                    }
                )
                + "\n"
            )


def load_scores(path: str | Path) -> PrecomputedScorer:
    scores: dict[tuple[str, str], RelevanceProbs] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            scores[(d["query_id"], d["product_id"])] = RelevanceProbs(
                pE=d["pE"], pS=d["pS"], pI=d["pI"]
            )
    return PrecomputedScorer(scores)
