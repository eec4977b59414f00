"""Exact nearest-neighbor retrieval and ranking metrics.

The index is a dense matrix of unit-normalized product embeddings; queries
score against every row (exact search, no approximation) so metric numbers
are reproducible to the bit. Metrics are macro-averaged per query: recall
of exact matches, precision of exact matches in the top ranks, and recall
of purchased products.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .catalog import Product, Query, ValidationError
from .encoder import TwoTowerEncoder

KIND_EM_RECALL = "small_index_em_recall"
KIND_EM_PRECISION = "big_index_em_precision"
KIND_ORDER_RECALL = "purchased_order_recall"
EVAL_KINDS = (KIND_EM_RECALL, KIND_EM_PRECISION, KIND_ORDER_RECALL)


@dataclass(frozen=True)
class EvalSpec:
    """One metric request: which measurement, at which cutoff."""

    kind: str
    k: int = 20

    def __post_init__(self):
        if self.kind not in EVAL_KINDS:
            raise ValueError(f"unknown eval kind {self.kind!r}; choose from {EVAL_KINDS}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class RetrievalIndex:
    """Immutable product-side search structure.

    ``matrix`` holds one unit-normalized embedding per product, row order
    matching ``ids``. ``id_sort_rank`` caches each row's rank in
    lexicographic id order so tie-breaking is an O(1) lookup.
    """

    ids: tuple[str, ...]
    matrix: np.ndarray
    products: tuple[Product, ...]
    encoder: TwoTowerEncoder
    id_sort_rank: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.ids) != self.matrix.shape[0] or len(self.ids) != len(self.products):
            raise ValueError("ids, matrix rows, and products must align")
        rank = np.empty(len(self.ids), dtype=np.int64)
        rank[np.argsort(np.array(self.ids))] = np.arange(len(self.ids))
        self.id_sort_rank = rank

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def products_by_id(self) -> dict[str, Product]:
        return {p.id: p for p in self.products}


def build_index(products: Sequence[Product], encoder: TwoTowerEncoder) -> RetrievalIndex:
    if not products:
        raise ValidationError("cannot build an index over zero products")
    seen = set()
    for p in products:
        if p.id in seen:
            raise ValidationError(f"duplicate product id {p.id!r} in index input")
        seen.add(p.id)
    matrix = encoder.transform(products)
    return RetrievalIndex(
        ids=tuple(p.id for p in products),
        matrix=matrix,
        products=tuple(products),
        encoder=encoder,
    )


def top_k(index: RetrievalIndex, query_embedding: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top k products by cosine, score descending, ties broken by ascending
    product id. Errors rather than silently truncating when k exceeds the
    index."""
    if not 1 <= k <= index.size:
        raise ValueError(f"k must be in [1, {index.size}], got {k}")
    scores = index.matrix @ np.asarray(query_embedding, dtype=float)
    order = np.lexsort((index.id_sort_rank, -scores))[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def retrieve(index: RetrievalIndex, query: Query, k: int) -> list[tuple[str, float]]:
    return top_k(index, index.encoder.embed_query(query.text), k)


def em_recall_at_k(
    retrieved_ids: Sequence[str], exact_ids: frozenset[str] | set[str], k: int
) -> float | None:
    """Fraction of a query's exact matches found in the top k. ``None`` when
    the query has no exact matches (the query is excluded, not scored 0)."""
    if not exact_ids:
        return None
    hits = sum(1 for pid in retrieved_ids[:k] if pid in exact_ids)
    return hits / len(exact_ids)


def em_precision_at_k(
    retrieved_ids: Sequence[str], exact_ids: frozenset[str] | set[str], k: int
) -> float:
    """Fraction of the top k that are exact matches."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(retrieved_ids) < k:
        raise ValueError(f"need at least {k} retrieved ids, got {len(retrieved_ids)}")
    return sum(1 for pid in retrieved_ids[:k] if pid in exact_ids) / k


def order_recall_at_k(
    retrieved_ids: Sequence[str], purchased_ids: frozenset[str] | set[str], k: int
) -> float | None:
    """Fraction of a query's purchased products found in the top k. ``None``
    when nothing was purchased for the query."""
    if not purchased_ids:
        return None
    hits = sum(1 for pid in retrieved_ids[:k] if pid in purchased_ids)
    return hits / len(purchased_ids)


@dataclass(frozen=True)
class EvalRow:
    kind: str
    k: int
    query_count: int
    excluded_count: int
    macro_metric: float

    def to_tsv(self) -> str:
        return f"{self.kind}\t{self.k}\t{self.query_count}\t{self.excluded_count}\t{self.macro_metric:.6f}"


@dataclass
class EvalReport:
    rows: list[EvalRow]
    per_query: dict[tuple[str, int], dict[str, float]]

    def value(self, kind: str, k: int) -> float:
        for row in self.rows:
            if row.kind == kind and row.k == k:
                return row.macro_metric
        raise KeyError(f"no row for ({kind}, {k})")


def run_eval(
    index: RetrievalIndex,
    queries: Sequence[Query],
    ground_truth,
    specs: Sequence[EvalSpec] = tuple(EvalSpec(kind) for kind in EVAL_KINDS),
) -> EvalReport:
    """Retrieve once per query at the largest requested cutoff, then score
    every spec on prefixes of that single ranking. The macro average is the
    unweighted mean over queries with a non-empty golden set; queries with
    an empty set are excluded and counted."""
    if not queries:
        raise ValidationError("run_eval needs at least one query")
    if not specs:
        raise ValueError("run_eval needs at least one spec")
    max_k = max(spec.k for spec in specs)
    if max_k > index.size:
        raise ValueError(f"k={max_k} exceeds index size {index.size}")

    rankings = {}
    for query in queries:
        rankings[query.id] = [pid for pid, _ in retrieve(index, query, max_k)]

    rows: list[EvalRow] = []
    per_query: dict[tuple[str, int], dict[str, float]] = {}
    for spec in specs:
        values: dict[str, float] = {}
        excluded = 0
        for query in queries:
            retrieved = rankings[query.id]
            if spec.kind == KIND_EM_RECALL:
                value = em_recall_at_k(retrieved, ground_truth.exact_ids(query.id), spec.k)
            elif spec.kind == KIND_EM_PRECISION:
                value = em_precision_at_k(retrieved, ground_truth.exact_ids(query.id), spec.k)
            else:
                value = order_recall_at_k(retrieved, ground_truth.purchased_ids(query.id), spec.k)
            if value is None:
                excluded += 1
            else:
                values[query.id] = value
        macro = float(np.mean(list(values.values()))) if values else 0.0
        rows.append(
            EvalRow(
                kind=spec.kind,
                k=spec.k,
                query_count=len(values),
                excluded_count=excluded,
                macro_metric=macro,
            )
        )
        per_query[(spec.kind, spec.k)] = values
    return EvalReport(rows=rows, per_query=per_query)


EVAL_REPORT_HEADER = "kind\tk\tquery_count\texcluded_count\tmacro_metric"


def write_eval_report(report: EvalReport, path: str | Path) -> None:
    lines = [EVAL_REPORT_HEADER]
    lines.extend(row.to_tsv() for row in report.rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_eval_report(path: str | Path) -> list[EvalRow]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if not lines or lines[0] != EVAL_REPORT_HEADER:
        raise ValueError(f"unrecognized eval report header in {path}")
    rows = []
    for line in lines[1:]:
        kind, k, count, excluded, macro = line.split("\t")
        rows.append(
            EvalRow(
                kind=kind,
                k=int(k),
                query_count=int(count),
                excluded_count=int(excluded),
                macro_metric=float(macro),
            )
        )
    return rows


def write_per_query_report(report: EvalReport, path: str | Path) -> None:
    """Optional per-query detail: one row per (kind, k, query)."""
    lines = ["kind\tk\tquery_id\tvalue"]
    for (kind, k), values in report.per_query.items():
        for qid in sorted(values):
            lines.append(f"{kind}\t{k}\t{qid}\t{values[qid]:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
