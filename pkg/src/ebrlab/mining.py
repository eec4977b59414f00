"""Offline hard-negative and semi-positive mining over model retrievals.

After a training iteration, each query's top-K retrieved products are
classified with product-type and token-overlap guardrails:

* negative: the product's PT is not among the query's relevant PTs AND
  fewer than half of the query tokens appear in the title;
* semi-positive: relevant PT with score at or above the threshold, overlap
  at or above half, and retrieval position strictly deeper than 50;
* skip: everything else.

Negatives carry an engagement label of 0; semi-positives carry
``min(2, 2 * overlap)``; relevance labels for both come from the relevance
scorer. Per-query mining is independent and parallelizable; the index is
read-only during mining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .catalog import PTPrediction, Product, Query
from .labeling import LabeledPair, RelevanceParams, relevance_label

if TYPE_CHECKING:  # pragma: no cover
    from .evalkit import RetrievalIndex
    from .rrm import RelevanceScorer

VERDICT_NEGATIVE = "negative"
VERDICT_SEMI_POSITIVE = "semi_positive"
VERDICT_SKIP = "skip"


def token_overlap_fraction(query_text: str, product_title: str) -> float:
    """Fraction of distinct lowercase query tokens found among the distinct
    lowercase title tokens."""
    query_tokens = set(query_text.lower().split())
    if not query_tokens:
        raise ValueError("query text has no tokens")
    title_tokens = set(product_title.lower().split())
    return len(query_tokens & title_tokens) / len(query_tokens)


@dataclass(frozen=True)
class MiningConfig:
    top_k: int = 200
    pt_score_threshold: float = 0.3
    overlap_threshold: float = 0.5
    semi_positive_min_position: int = 50
    negatives_per_query: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.top_k <= self.semi_positive_min_position:
            raise ValueError(
                f"top_k ({self.top_k}) must exceed semi_positive_min_position "
                f"({self.semi_positive_min_position}) or no semi-positives can surface"
            )
        for name in ("pt_score_threshold", "overlap_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.negatives_per_query < 0:
            raise ValueError("negatives_per_query must be >= 0")


@dataclass(frozen=True)
class MiningVerdict:
    query_id: str
    product_id: str
    position: int  # 1-based retrieval rank
    verdict: str
    assigned_s: float
    assigned_r: float

    def __post_init__(self):
        if self.verdict not in (VERDICT_NEGATIVE, VERDICT_SEMI_POSITIVE, VERDICT_SKIP):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.verdict == VERDICT_NEGATIVE and self.assigned_s != 0.0:
            raise ValueError("negatives must carry assigned_s = 0")
        if self.verdict == VERDICT_SEMI_POSITIVE and not 1.0 <= self.assigned_s <= 2.0:
            raise ValueError(f"semi-positive assigned_s must lie in [1, 2], got {self.assigned_s}")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "product_id": self.product_id,
            "position": self.position,
            "verdict": self.verdict,
            "assigned_s": self.assigned_s,
            "assigned_r": self.assigned_r,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MiningVerdict":
        return cls(
            query_id=d["query_id"],
            product_id=d["product_id"],
            position=d["position"],
            verdict=d["verdict"],
            assigned_s=d["assigned_s"],
            assigned_r=d["assigned_r"],
        )


def classify_candidate(
    query: Query,
    product: Product,
    position: int,
    relevant_pts: PTPrediction,
    config: MiningConfig,
    scorer: "RelevanceScorer",
    relevance_params: RelevanceParams | None = None,
) -> MiningVerdict:
    """Map one retrieved candidate to exactly one verdict.

    Relevant-PT membership ignores the score for the negative rule; the
    score threshold applies only to the semi-positive rule. ``position`` is
    1-based and "deeper than 50" is strict.
    """
    if position < 1:
        raise ValueError(f"position must be >= 1, got {position}")
    relevance_params = relevance_params or RelevanceParams()
    overlap = token_overlap_fraction(query.text, product.title)
    pt_relevant = product.product_type in relevant_pts.product_types

    if not pt_relevant and overlap < config.overlap_threshold:
        verdict, assigned_s = VERDICT_NEGATIVE, 0.0
    elif (
        pt_relevant
        and relevant_pts.score_of(product.product_type) >= config.pt_score_threshold
        and overlap >= config.overlap_threshold
        and position > config.semi_positive_min_position
    ):
        verdict, assigned_s = VERDICT_SEMI_POSITIVE, min(2.0, 2.0 * overlap)
    else:
        verdict, assigned_s = VERDICT_SKIP, 0.0

    if verdict == VERDICT_SKIP:
        assigned_r = 0.0
    else:
        assigned_r = relevance_label(scorer.score(query, product), relevance_params).value
    return MiningVerdict(
        query_id=query.id,
        product_id=product.id,
        position=position,
        verdict=verdict,
        assigned_s=assigned_s,
        assigned_r=assigned_r,
    )


def _stratify_negatives_by_pt(
    negatives: list[MiningVerdict],
    products_by_id: dict[str, Product],
    quota: int,
    rng: np.random.Generator,
) -> list[MiningVerdict]:
    """Round-robin across PT groups in random group order until the quota is
    met; within a group candidates are taken in ascending retrieval position
    (hardest first)."""
    if len(negatives) <= quota:
        return list(negatives)
    groups: dict[str, list[MiningVerdict]] = {}
    for verdict in negatives:
        groups.setdefault(products_by_id[verdict.product_id].product_type, []).append(verdict)
    for members in groups.values():
        members.sort(key=lambda v: v.position)
    group_order = [sorted(groups)[i] for i in rng.permutation(len(groups))]
    picked: list[MiningVerdict] = []
    depth = 0
    while len(picked) < quota:
        advanced = False
        for pt in group_order:
            members = groups[pt]
            if depth < len(members):
                picked.append(members[depth])
                advanced = True
                if len(picked) == quota:
                    break
        if not advanced:
            break
        depth += 1
    return picked


def mine_for_query(
    query: Query,
    index: "RetrievalIndex",
    scorer: "RelevanceScorer",
    pt_prediction: PTPrediction,
    config: MiningConfig,
    rng: np.random.Generator,
    relevance_params: RelevanceParams | None = None,
) -> tuple[list[MiningVerdict], list[MiningVerdict]]:
    """Classify the query's top-K retrieved products, then downsample the
    negatives to ``negatives_per_query`` with PT-stratified round-robin.
    All semi-positives are kept."""
    from .evalkit import top_k

    query_embedding = index.encoder.embed_query(query.text)
    k = min(config.top_k, index.size)
    retrieved = top_k(index, query_embedding, k)
    products_by_id = index.products_by_id

    negatives: list[MiningVerdict] = []
    semi_positives: list[MiningVerdict] = []
    for position, (product_id, _score) in enumerate(retrieved, start=1):
        verdict = classify_candidate(
            query, products_by_id[product_id], position, pt_prediction, config, scorer, relevance_params
        )
        if verdict.verdict == VERDICT_NEGATIVE:
            negatives.append(verdict)
        elif verdict.verdict == VERDICT_SEMI_POSITIVE:
            semi_positives.append(verdict)
    negatives = _stratify_negatives_by_pt(negatives, products_by_id, config.negatives_per_query, rng)
    return negatives, semi_positives


def merge_mined(previous: list[LabeledPair], verdicts: Iterable[MiningVerdict]) -> list[LabeledPair]:
    """Fold mined verdicts into a training set.

    Previous rows are retained verbatim; mined rows are appended. For a
    (query, product) pair that already exists, an engaged row always wins
    and the mined duplicate is dropped; a mined row seen again is replaced,
    so repeated merges are idempotent.
    """
    merged = list(previous)
    slot_by_pair: dict[tuple[str, str], int] = {}
    engaged_pairs = set()
    for i, row in enumerate(merged):
        key = (row.query_id, row.product_id)
        slot_by_pair[key] = i
        if row.origin == "engaged":
            engaged_pairs.add(key)

    for verdict in verdicts:
        if verdict.verdict == VERDICT_SKIP:
            continue
        key = (verdict.query_id, verdict.product_id)
        if key in engaged_pairs:
            continue
        origin = "offline-negative" if verdict.verdict == VERDICT_NEGATIVE else "semi-positive"
        row = LabeledPair(
            query_id=verdict.query_id,
            product_id=verdict.product_id,
            s_raw=verdict.assigned_s,
            s_revised=verdict.assigned_s,
            r=verdict.assigned_r,
            origin=origin,
        )
        if key in slot_by_pair:
            merged[slot_by_pair[key]] = row
        else:
            slot_by_pair[key] = len(merged)
            merged.append(row)
    return merged


def summarize(verdicts: Iterable[MiningVerdict]) -> list[tuple[str, int, int]]:
    """Per-query (negatives, semi-positives) counts, sorted by query id."""
    counts: dict[str, list[int]] = {}
    for verdict in verdicts:
        row = counts.setdefault(verdict.query_id, [0, 0])
        if verdict.verdict == VERDICT_NEGATIVE:
            row[0] += 1
        elif verdict.verdict == VERDICT_SEMI_POSITIVE:
            row[1] += 1
    return [(qid, c[0], c[1]) for qid, c in sorted(counts.items())]
