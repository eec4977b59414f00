"""Engagement labels, relevance-feedback label revision, and relevance labels.

The engagement label is a weighted sum of funnel counts in which orders
count fully and impressions/clicks/add-to-carts are progressively
discounted. Revision downgrades suspicious engaged pairs in two stages
driven by the exact-match probability; both thresholds and both downgrade
targets are parameters. The relevance label folds the three class
probabilities into a single value in [0, 1] with penalty multipliers for
the substitute and irrelevant cases.

All operations here are pure functions; :func:`annotate_dataset` is a
one-shot batch pass whose output is persisted next to the training file.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .catalog import (
    EngagementRecord,
    Product,
    Query,
    ReferentialIntegrityError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .rrm import RelevanceProbs, RelevanceScorer


@dataclass(frozen=True)
class LabelingWeights:
    w_i: float = 0.001
    w_c: float = 0.01
    w_a: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.w_i < self.w_c < self.w_a < 1.0:
            raise ValueError(
                f"weights must satisfy 0 < w_i < w_c < w_a < 1, got "
                f"({self.w_i}, {self.w_c}, {self.w_a})"
            )


@dataclass(frozen=True)
class RevisionParams:
    """Two-stage downgrade: moderate confidence maps the label to ``a``,
    low confidence to ``b``; the label is never increased."""

    t_low: float = 0.3
    t_high: float = 0.7
    a: float = 0.1
    b: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.t_low < self.t_high < 1.0:
            raise ValueError(f"need 0 < t_low < t_high < 1, got ({self.t_low}, {self.t_high})")
        if not 0.0 < self.b < self.a:
            raise ValueError(f"need 0 < b < a, got (a={self.a}, b={self.b})")


@dataclass(frozen=True)
class RelevanceParams:
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {value}")


@dataclass(frozen=True)
class EngagementLabel:
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"engagement label must be >= 0, got {self.value}")


@dataclass(frozen=True)
class RelevanceLabel:
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"relevance label must lie in [0, 1], got {self.value}")


def engagement_label(rec: EngagementRecord, w: LabelingWeights = LabelingWeights()) -> EngagementLabel:
    """Weighted funnel sum: w_i*impressions + w_c*clicks + w_a*atcs + orders."""
    value = w.w_i * rec.impressions + w.w_c * rec.clicks + w.w_a * rec.atcs + rec.orders
    return EngagementLabel(value)


def revise_label(
    s: EngagementLabel, probs: "RelevanceProbs", p: RevisionParams = RevisionParams()
) -> EngagementLabel:
    """Downgrade the engagement label when the exact-match probability is
    weak. Exactly one branch applies; the result never exceeds ``s``.

    Boundary conditions are deliberate: the moderate band is the half-open
    interval [t_low, t_high), and the guards ``s > a`` / ``s > b`` are
    strict.
    """
    if p.t_low <= probs.pE < p.t_high and s.value > p.a:
        return EngagementLabel(p.a)
    if probs.pE < p.t_low and s.value > p.b:
        return EngagementLabel(p.b)
    return s


def relevance_label(probs: "RelevanceProbs", p: RelevanceParams = RelevanceParams()) -> RelevanceLabel:
    """Collapse class probabilities into one value in [0, 1].

    Base value pE + lambda2*pS; multiplied by lambda1 when the irrelevant
    class dominates both others.
    """
    base = probs.pE + p.lambda2 * probs.pS
    if probs.pI > max(probs.pE, probs.pS):
        return RelevanceLabel(p.lambda1 * base)
    return RelevanceLabel(base)


@dataclass(frozen=True)
class LabeledPair:
    """One training-set row: a (query, product) pair with raw and revised
    engagement labels, relevance label, and its provenance."""

    query_id: str
    product_id: str
    s_raw: float
    s_revised: float
    r: float
    origin: str = "engaged"  # engaged | offline-negative | semi-positive
    probs: tuple[float, float, float] | None = None

    def to_dict(self) -> dict:
        d = {
            "query_id": self.query_id,
            "product_id": self.product_id,
            "s_raw": self.s_raw,
            "s_revised": self.s_revised,
            "r": self.r,
            "origin": self.origin,
        }
        if self.probs is not None:
            d["probs"] = {"pE": self.probs[0], "pS": self.probs[1], "pI": self.probs[2]}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledPair":
        probs = d.get("probs")
        return cls(
            query_id=d["query_id"],
            product_id=d["product_id"],
            s_raw=d["s_raw"],
            s_revised=d["s_revised"],
            r=d["r"],
            origin=d.get("origin", "engaged"),
            probs=(probs["pE"], probs["pS"], probs["pI"]) if probs else None,
        )


LABEL_SCHEMES = ("funnel", "orders_only")


def annotate_dataset(
    engagement: Iterable[EngagementRecord],
    queries: Sequence[Query],
    products: Sequence[Product],
    scorer: "RelevanceScorer",
    weights: LabelingWeights = LabelingWeights(),
    revision: RevisionParams = RevisionParams(),
    relevance: RelevanceParams = RelevanceParams(),
    scheme: str = "funnel",
    apply_revision: bool = True,
) -> list[LabeledPair]:
    """Label every engagement row: raw label, scored probabilities, revised
    label, relevance label. Output preserves input row order.

    ``scheme`` selects the raw label: "funnel" is the weighted sum over the
    whole engagement funnel, "orders_only" counts orders alone (the legacy
    baseline the funnel scheme is compared against). ``apply_revision=False``
    keeps s_revised equal to s_raw for revision ablations.
    """
    if scheme not in LABEL_SCHEMES:
        raise ValueError(f"scheme must be one of {LABEL_SCHEMES}, got {scheme!r}")
    queries_by_id = {q.id: q for q in queries}
    products_by_id = {p.id: p for p in products}
    rows: list[LabeledPair] = []
    for rec in engagement:
        query = queries_by_id.get(rec.query_id)
        product = products_by_id.get(rec.product_id)
        if query is None:
            raise ReferentialIntegrityError(f"engagement references unknown query {rec.query_id!r}")
        if product is None:
            raise ReferentialIntegrityError(f"engagement references unknown product {rec.product_id!r}")
        if scheme == "orders_only":
            s_raw = EngagementLabel(float(rec.orders))
        else:
            s_raw = engagement_label(rec, weights)
        probs = scorer.score(query, product)
        s_revised = revise_label(s_raw, probs, revision) if apply_revision else s_raw
        r = relevance_label(probs, relevance)
        rows.append(
            LabeledPair(
                query_id=rec.query_id,
                product_id=rec.product_id,
                s_raw=s_raw.value,
                s_revised=s_revised.value,
                r=r.value,
                probs=(probs.pE, probs.pS, probs.pI),
            )
        )
    return rows
