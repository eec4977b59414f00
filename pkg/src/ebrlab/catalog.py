"""Domain records and line-delimited JSON I/O.

Every dataset file is UTF-8 JSONL: one object per line, field names matching
the record dataclasses below. Unknown fields are ignored on load so files
can gain fields without breaking older readers. Records are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

RELEVANCE_CLASSES = ("Exact", "Substitute", "Irrelevant")

QUERIES_FILE = "queries.jsonl"
PRODUCTS_FILE = "products.jsonl"
ENGAGEMENT_FILE = "engagement.jsonl"
JUDGMENTS_FILE = "judgments.jsonl"
PT_PREDICTIONS_FILE = "pt_predictions.jsonl"
GROUND_TRUTH_FILE = "ground_truth.jsonl"
CORRUPTED_QUERIES_FILE = "queries_corrupted.jsonl"


class DatasetError(ValueError):
    """Base class for dataset file and record problems."""


class ParseError(DatasetError):
    """A line could not be parsed into a record."""

    def __init__(self, path: str | Path, line_number: int, message: str):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = str(path)
        self.line_number = line_number


class ValidationError(DatasetError):
    """A record violates an invariant (duplicate id, bad value, ...)."""


class ReferentialIntegrityError(ValidationError):
    """A record references a query or product id that does not exist."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValidationError(message)


def _count(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    _require(value >= 0, f"{name} must be >= 0, got {value}")
    return value


@dataclass(frozen=True)
class Query:
    """A search query with a sampling weight for traffic-weighted eval."""

    id: str
    text: str
    traffic_weight: float = 1.0

    def __post_init__(self):
        _require(bool(self.id), "query id must be non-empty")
        _require(bool(self.text.strip()), f"query {self.id!r}: text is empty")
        object.__setattr__(self, "traffic_weight", float(self.traffic_weight))
        _require(self.traffic_weight >= 0, f"query {self.id!r}: traffic_weight < 0")

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "traffic_weight": self.traffic_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        return cls(id=d["id"], text=d["text"], traffic_weight=d.get("traffic_weight", 1.0))


@dataclass(frozen=True)
class Product:
    """A catalog product: title, ordered attribute map, and product type.

    Attribute order is preserved end to end; the encoder's sentinel-token
    concatenation depends on it.
    """

    id: str
    title: str
    attributes: dict[str, str] = field(default_factory=dict)
    product_type: str = ""

    def __post_init__(self):
        _require(bool(self.id), "product id must be non-empty")
        _require(bool(self.title.strip()), f"product {self.id!r}: title is empty")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "attributes": dict(self.attributes),
            "product_type": self.product_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Product":
        return cls(
            id=d["id"],
            title=d["title"],
            attributes=dict(d.get("attributes", {})),
            product_type=d.get("product_type", ""),
        )


@dataclass(frozen=True)
class EngagementRecord:
    """Raw per-(query, product) engagement funnel counts."""

    query_id: str
    product_id: str
    impressions: int = 0
    clicks: int = 0
    atcs: int = 0
    orders: int = 0

    def __post_init__(self):
        for name in ("impressions", "clicks", "atcs", "orders"):
            _count(getattr(self, name), f"engagement {self.query_id}/{self.product_id}: {name}")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "product_id": self.product_id,
            "impressions": self.impressions,
            "clicks": self.clicks,
            "atcs": self.atcs,
            "orders": self.orders,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngagementRecord":
        return cls(
            query_id=d["query_id"],
            product_id=d["product_id"],
            impressions=d.get("impressions", 0),
            clicks=d.get("clicks", 0),
            atcs=d.get("atcs", 0),
            orders=d.get("orders", 0),
        )


@dataclass(frozen=True)
class JudgmentRecord:
    """A human-style relevance judgment on the 3-point scale."""

    query_id: str
    product_id: str
    klass: str

    def __post_init__(self):
        _require(
            self.klass in RELEVANCE_CLASSES,
            f"judgment {self.query_id}/{self.product_id}: klass must be one of "
            f"{RELEVANCE_CLASSES}, got {self.klass!r}",
        )

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "product_id": self.product_id, "klass": self.klass}

    @classmethod
    def from_dict(cls, d: dict) -> "JudgmentRecord":
        return cls(query_id=d["query_id"], product_id=d["product_id"], klass=d["klass"])


@dataclass(frozen=True)
class PTPrediction:
    """Predicted relevant product types for a query, each with a score."""

    query_id: str
    entries: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        entries = tuple((str(pt), float(score)) for pt, score in self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for pt, score in entries:
            _require(
                0.0 <= score <= 1.0,
                f"pt prediction {self.query_id}: score {score} for {pt!r} outside [0, 1]",
            )
            _require(pt not in seen, f"pt prediction {self.query_id}: duplicate product_type {pt!r}")
            seen.add(pt)

    @property
    def product_types(self) -> set[str]:
        return {pt for pt, _ in self.entries}

    def score_of(self, product_type: str) -> float:
        for pt, score in self.entries:
            if pt == product_type:
                return score
        return 0.0

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "entries": [{"product_type": pt, "score": score} for pt, score in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PTPrediction":
        return cls(
            query_id=d["query_id"],
            entries=tuple((e["product_type"], e["score"]) for e in d.get("entries", ())),
        )


RECORD_TYPES = (Query, Product, EngagementRecord, JudgmentRecord, PTPrediction)


def _reject_duplicate_keys(pairs):
    d = {}
    for k, v in pairs:
        if k in d:
            raise ValueError(f"duplicate key {k!r}")
        d[k] = v
    return d


def load_records(path: str | Path, record_type) -> list:
    """Load one JSONL file of ``record_type`` rows.

    Malformed lines raise :class:`ParseError` carrying the 1-based line
    number; record invariant violations surface the same way.
    """
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line, object_pairs_hook=_reject_duplicate_keys)
                records.append(record_type.from_dict(payload))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(path, line_number, f"{type(exc).__name__}: {exc}") from exc
    return records


def save_dataset(records: Iterable, path: str | Path) -> None:
    """Write records as JSONL. Round-trips: load_records(save_dataset(x)) == x."""
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset file {path}: {exc}") from exc


def _check_unique_ids(records: Sequence, kind: str) -> None:
    seen = set()
    for record in records:
        if record.id in seen:
            raise ValidationError(f"duplicate {kind} id {record.id!r}")
        seen.add(record.id)


def load_catalog(path: str | Path) -> tuple[list[Query], list[Product]]:
    """Load a dataset directory's queries and products files.

    ``path`` is the directory holding ``queries.jsonl`` and ``products.jsonl``.
    Ids must be unique per kind.
    """
    path = Path(path)
    queries = load_records(path / QUERIES_FILE, Query)
    products = load_records(path / PRODUCTS_FILE, Product)
    _check_unique_ids(queries, "query")
    _check_unique_ids(products, "product")
    return queries, products


def check_referential_integrity(
    queries: Sequence[Query],
    products: Sequence[Product],
    engagement: Sequence[EngagementRecord] = (),
    judgments: Sequence[JudgmentRecord] = (),
    pt_predictions: Sequence[PTPrediction] = (),
) -> None:
    """Verify that every reference points at an existing query/product id."""
    query_ids = {q.id for q in queries}
    product_ids = {p.id for p in products}
    for rec in engagement:
        if rec.query_id not in query_ids:
            raise ReferentialIntegrityError(f"engagement references unknown query {rec.query_id!r}")
        if rec.product_id not in product_ids:
            raise ReferentialIntegrityError(f"engagement references unknown product {rec.product_id!r}")
    for rec in judgments:
        if rec.query_id not in query_ids:
            raise ReferentialIntegrityError(f"judgment references unknown query {rec.query_id!r}")
        if rec.product_id not in product_ids:
            raise ReferentialIntegrityError(f"judgment references unknown product {rec.product_id!r}")
    for rec in pt_predictions:
        if rec.query_id not in query_ids:
            raise ReferentialIntegrityError(f"pt prediction references unknown query {rec.query_id!r}")
