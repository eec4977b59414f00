"""Deterministic synthetic-world generator.

Builds a small e-commerce universe with a recoverable ground-truth
relevance function: product types with two interchangeable head nouns,
templated product titles and queries, a funnel-shaped engagement log with
a controllable false-positive rate (products bought against irrelevant
queries), noiseless judgment rows, and oracle product-type predictions.
Every draw comes from purpose-split substreams of one seed, so identical
configs produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import TypoConfig, inject_typos
from .catalog import (
    ENGAGEMENT_FILE,
    GROUND_TRUTH_FILE,
    JUDGMENTS_FILE,
    PRODUCTS_FILE,
    PT_PREDICTIONS_FILE,
    QUERIES_FILE,
    EngagementRecord,
    JudgmentRecord,
    Product,
    PTPrediction,
    Query,
    save_dataset,
)

COLORS = (
    "red", "blue", "green", "black", "white", "silver", "copper", "teal",
    "amber", "ivory", "crimson", "navy", "olive", "coral", "slate", "gold",
)
BRANDS = (
    "acme", "nordify", "zentra", "bravura", "kelpco", "lumino", "vexor",
    "ridgeline", "solace", "tundra", "marlowe", "quixley", "ferrox",
    "bluepeak", "orchid", "halcyon", "dapple", "krona", "veldt", "mosaic",
)
# "copper" and "silver" double as color words, which makes some queries
# lexically ambiguous on purpose (a copper-colored flask versus a flask
# made of copper).
MATERIALS = (
    "steel", "bamboo", "copper", "cotton", "silver", "ceramic", "leather",
    "mesh", "oak", "wool", "granite", "rubber",
)
AUDIENCES = (
    "kids", "adults", "toddlers", "runners", "campers", "chefs", "gamers",
    "students", "travelers", "gardeners",
)
# Each product type has two interchangeable head nouns; a query names one
# of them, products carry either, and sharing the type but not the noun is
# what makes a substitute.
PT_NOUN_PAIRS = (
    ("bottle", "flask"), ("lamp", "lantern"), ("mat", "pad"), ("grinder", "mill"),
    ("backpack", "rucksack"), ("speaker", "soundbar"), ("kettle", "teapot"),
    ("razor", "trimmer"), ("blanket", "quilt"), ("helmet", "visor"),
    ("notebook", "journal"), ("stool", "bench"), ("whisk", "spatula"),
    ("hammock", "swing"), ("monitor", "display"), ("sandal", "slipper"),
)
ACCESSORY_NOUNS = ("holder", "case", "stand", "cover", "organizer", "rack")
ACCESSORY_PT = "pt-acc"


@dataclass(frozen=True)
class VocabConfig:
    num_colors: int = 10
    num_brands: int = 12
    num_materials: int = 8
    num_audiences: int = 8

    def __post_init__(self):
        limits = (
            ("num_colors", self.num_colors, len(COLORS)),
            ("num_brands", self.num_brands, len(BRANDS)),
            ("num_materials", self.num_materials, len(MATERIALS)),
            ("num_audiences", self.num_audiences, len(AUDIENCES)),
        )
        for name, value, limit in limits:
            if not 2 <= value <= limit:
                raise ValueError(f"{name} must be in [2, {limit}], got {value}")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    num_product_types: int = 16
    products_per_type: int = 120
    num_queries: int = 500
    vocab: VocabConfig = field(default_factory=VocabConfig)
    false_positive_rate: float = 0.03
    judgment_coverage: float = 0.02
    misspell_rate: float = 0.13
    accessories_per_type: int = 5
    attribute_dropout: float = 0.55

    def __post_init__(self):
        for name, rate in (
            ("false_positive_rate", self.false_positive_rate),
            ("judgment_coverage", self.judgment_coverage),
            ("misspell_rate", self.misspell_rate),
            ("attribute_dropout", self.attribute_dropout),
        ):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")
        if not 1 <= self.num_product_types <= len(PT_NOUN_PAIRS):
            raise ValueError(f"num_product_types must be in [1, {len(PT_NOUN_PAIRS)}]")
        if self.products_per_type < 1 or self.num_queries < 1:
            raise ValueError("counts must be >= 1")
        if self.accessories_per_type < 0:
            raise ValueError("accessories_per_type must be >= 0")


class GroundTruth:
    """Rule-based relevance over the generated ids.

    A product is Exact for a query when they share the product type and
    head noun and the product satisfies every query constraint attribute;
    Substitute when only the product type matches; Irrelevant otherwise.
    Purchases record which products had orders for the query.
    """

    def __init__(
        self,
        query_rules: dict[str, dict],
        product_facts: dict[str, dict],
        purchases: dict[str, frozenset[str]],
    ):
        self.query_rules = query_rules
        self.product_facts = product_facts
        self.purchases = purchases
        self._exact_cache: dict[str, frozenset[str]] = {}

    def relevance(self, query_id: str, product_id: str) -> str:
        if query_id not in self.query_rules:
            raise KeyError(f"ground truth has no query {query_id!r}")
        if product_id not in self.product_facts:
            raise KeyError(f"ground truth has no product {product_id!r}")
        rule = self.query_rules[query_id]
        fact = self.product_facts[product_id]
        if fact["product_type"] != rule["product_type"]:
            return "Irrelevant"
        if fact["head_noun"] == rule["head_noun"] and all(
            fact["attributes"].get(k) == v for k, v in rule["constraints"].items()
        ):
            return "Exact"
        return "Substitute"

    def exact_ids(self, query_id: str) -> frozenset[str]:
        if query_id not in self._exact_cache:
            self._exact_cache[query_id] = frozenset(
                pid for pid in self.product_facts if self.relevance(query_id, pid) == "Exact"
            )
        return self._exact_cache[query_id]

    def purchased_ids(self, query_id: str) -> frozenset[str]:
        if query_id not in self.query_rules:
            raise KeyError(f"ground truth has no query {query_id!r}")
        return self.purchases.get(query_id, frozenset())

    def save(self, path: str | Path) -> None:
        lines = []
        for qid in sorted(self.query_rules):
            rule = self.query_rules[qid]
            lines.append(json.dumps({"kind": "query_rule", "query_id": qid, **rule}))
        for pid in sorted(self.product_facts):
            fact = self.product_facts[pid]
            lines.append(json.dumps({"kind": "product_fact", "product_id": pid, **fact}))
        for qid in sorted(self.purchases):
            lines.append(
                json.dumps(
                    {
                        "kind": "purchase",
                        "query_id": qid,
                        "product_ids": sorted(self.purchases[qid]),
                    }
                )
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        query_rules: dict[str, dict] = {}
        product_facts: dict[str, dict] = {}
        purchases: dict[str, frozenset[str]] = {}
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                kind = d.pop("kind")
                if kind == "query_rule":
                    query_rules[d.pop("query_id")] = d
                elif kind == "product_fact":
                    product_facts[d.pop("product_id")] = d
                elif kind == "purchase":
                    purchases[d["query_id"]] = frozenset(d["product_ids"])
                else:
                    raise ValueError(f"unknown ground truth row kind {kind!r}")
        return cls(query_rules, product_facts, purchases)


@dataclass
class World:
    config: WorldConfig
    queries: list[Query]
    products: list[Product]
    engagement: list[EngagementRecord]
    judgments: list[JudgmentRecord]
    pt_predictions: list[PTPrediction]
    ground_truth: GroundTruth

    def save(self, dir_path: str | Path) -> None:
        dir_path = Path(dir_path)
        dir_path.mkdir(parents=True, exist_ok=True)
        save_dataset(self.queries, dir_path / QUERIES_FILE)
        save_dataset(self.products, dir_path / PRODUCTS_FILE)
        save_dataset(self.engagement, dir_path / ENGAGEMENT_FILE)
        save_dataset(self.judgments, dir_path / JUDGMENTS_FILE)
        save_dataset(self.pt_predictions, dir_path / PT_PREDICTIONS_FILE)
        self.ground_truth.save(dir_path / GROUND_TRUTH_FILE)


def _make_products(config: WorldConfig, rng: np.random.Generator):
    vocab = config.vocab
    colors = COLORS[: vocab.num_colors]
    brands = BRANDS[: vocab.num_brands]
    materials = MATERIALS[: vocab.num_materials]
    audiences = AUDIENCES[: vocab.num_audiences]
    pts = [f"pt-{PT_NOUN_PAIRS[i][0]}" for i in range(config.num_product_types)]

    products: list[Product] = []
    facts: dict[str, dict] = {}
    attr_names = ("color", "brand", "material", "audience")
    for i in range(config.num_product_types):
        nouns = PT_NOUN_PAIRS[i]
        for j in range(config.products_per_type):
            noun = nouns[int(rng.integers(0, 2))]
            color = colors[int(rng.integers(0, len(colors)))]
            brand = brands[int(rng.integers(0, len(brands)))]
            material = materials[int(rng.integers(0, len(materials)))]
            audience = audiences[int(rng.integers(0, len(audiences)))]
            pid = f"p-{i:02d}-{j:03d}"
            latent = {"color": color, "brand": brand, "material": material, "audience": audience}
            # Real catalogs are incomplete: with this probability one
            # attribute is missing from the listing (title and attribute
            # map alike). Shoppers still see it in the photos, so the
            # recorded truth keeps the full assignment while the catalog
            # row omits it.
            hidden = None
            if rng.random() < config.attribute_dropout:
                hidden = attr_names[int(rng.integers(0, len(attr_names)))]
            observed = {k: v for k, v in latent.items() if k != hidden}
            title_parts = []
            if hidden != "color":
                title_parts.append(color)
            if hidden != "brand":
                title_parts.append(brand)
            if hidden != "material":
                title_parts.append(material)
            title_parts.append(noun)
            if hidden != "audience":
                title_parts.extend(("for", audience))
            products.append(
                Product(
                    id=pid,
                    title=" ".join(title_parts),
                    attributes=observed,
                    product_type=pts[i],
                )
            )
            facts[pid] = {"product_type": pts[i], "head_noun": noun, "attributes": latent}
        # Accessory items mention this type's noun in the title but belong
        # to a separate type: high token overlap, irrelevant by rule.
        for a in range(config.accessories_per_type):
            noun = nouns[int(rng.integers(0, 2))]
            acc_noun = ACCESSORY_NOUNS[a % len(ACCESSORY_NOUNS)]
            color = colors[int(rng.integers(0, len(colors)))]
            brand = brands[int(rng.integers(0, len(brands)))]
            audience = audiences[int(rng.integers(0, len(audiences)))]
            pid = f"p-acc-{i:02d}-{a:02d}"
            attributes = {"color": color, "brand": brand, "audience": audience}
            products.append(
                Product(
                    id=pid,
                    title=f"{color} {brand} {noun} {acc_noun} for {audience}",
                    attributes=attributes,
                    product_type=ACCESSORY_PT,
                )
            )
            facts[pid] = {"product_type": ACCESSORY_PT, "head_noun": acc_noun, "attributes": attributes}
    return products, facts, pts


def _make_queries(config: WorldConfig, rng: np.random.Generator, pts, facts):
    vocab = config.vocab
    colors = COLORS[: vocab.num_colors]
    brands = BRANDS[: vocab.num_brands]
    materials = MATERIALS[: vocab.num_materials]
    audiences = AUDIENCES[: vocab.num_audiences]

    def render(pt_index: int, noun: str, template: int) -> tuple[str, dict]:
        if template == 0:
            return noun, {}
        if template == 1:
            color = colors[int(rng.integers(0, len(colors)))]
            return f"{color} {noun}", {"color": color}
        if template == 2:
            audience = audiences[int(rng.integers(0, len(audiences)))]
            return f"{noun} for {audience}", {"audience": audience}
        if template == 3:
            brand = brands[int(rng.integers(0, len(brands)))]
            return f"{brand} {noun}", {"brand": brand}
        if template == 4:
            color = colors[int(rng.integers(0, len(colors)))]
            audience = audiences[int(rng.integers(0, len(audiences)))]
            return f"{color} {noun} for {audience}", {"color": color, "audience": audience}
        material = materials[int(rng.integers(0, len(materials)))]
        return f"{material} {noun}", {"material": material}

    def has_exact(pt: str, noun: str, constraints: dict) -> bool:
        return any(
            fact["product_type"] == pt
            and fact["head_noun"] == noun
            and all(fact["attributes"].get(k) == v for k, v in constraints.items())
            for fact in facts.values()
        )

    template_pool = (0, 1, 1, 2, 2, 3, 3, 4, 5, 5)
    queries: list[Query] = []
    rules: dict[str, dict] = {}
    for n in range(config.num_queries):
        pt_index = int(rng.integers(0, config.num_product_types))
        noun = PT_NOUN_PAIRS[pt_index][int(rng.integers(0, 2))]
        text, constraints = "", {}
        for _ in range(20):
            template = template_pool[int(rng.integers(0, len(template_pool)))]
            text, constraints = render(pt_index, noun, template)
            if has_exact(pts[pt_index], noun, constraints):
                break
        else:
            text, constraints = noun, {}
        qid = f"q-{n:04d}"
        weight = float(int(rng.pareto(1.5) * 10.0) + 1)
        queries.append(Query(id=qid, text=text, traffic_weight=weight))
        rules[qid] = {
            "product_type": pts[pt_index],
            "head_noun": noun,
            "constraints": constraints,
        }
    return queries, rules


def _funnel(tier: str, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Engagement counts for one pair; the funnel invariant
    orders <= atcs <= clicks <= impressions holds by construction, and each
    tier's weighted label lands in a known bucket."""
    if tier == "ordered":
        impressions = int(rng.integers(30, 61))
        clicks = min(impressions, max(2, int(rng.binomial(impressions, 0.35))))
        atcs = min(clicks, max(1, int(rng.binomial(clicks, 0.5))))
        orders = min(atcs, max(1, int(rng.binomial(atcs, 0.6))))
    elif tier == "considered":
        impressions = int(rng.integers(20, 41))
        clicks = min(12, max(1, int(rng.binomial(impressions, 0.25))))
        atcs = min(8, max(1, int(rng.binomial(clicks, 0.4))))
        orders = 0
    else:
        impressions = int(rng.integers(5, 26))
        clicks = min(5, int(rng.binomial(impressions, 0.08)))
        atcs = 0
        orders = 0
    return impressions, clicks, atcs, orders


def generate_world(config: WorldConfig) -> World:
    streams = np.random.SeedSequence(config.seed).spawn(5)
    product_rng = np.random.default_rng(streams[0])
    query_rng = np.random.default_rng(streams[1])
    engagement_rng = np.random.default_rng(streams[2])
    judgment_rng = np.random.default_rng(streams[3])
    pt_rng = np.random.default_rng(streams[4])

    products, facts, pts = _make_products(config, product_rng)
    queries, rules = _make_queries(config, query_rng, pts, facts)
    products_by_id = {p.id: p for p in products}

    # Pools for engagement product choice.
    pids_sorted = sorted(facts)
    by_pt: dict[str, list[str]] = {}
    for pid in pids_sorted:
        by_pt.setdefault(facts[pid]["product_type"], []).append(pid)
    accessories_by_noun: dict[str, list[str]] = {}
    for pid in by_pt.get(ACCESSORY_PT, []):
        for token in products_by_id[pid].title.split():
            accessories_by_noun.setdefault(token, []).append(pid)

    def classify(qid: str, pid: str) -> str:
        rule = rules[qid]
        fact = facts[pid]
        if fact["product_type"] != rule["product_type"]:
            return "Irrelevant"
        if fact["head_noun"] == rule["head_noun"] and all(
            fact["attributes"].get(k) == v for k, v in rule["constraints"].items()
        ):
            return "Exact"
        return "Substitute"

    engagement: list[EngagementRecord] = []
    purchases: dict[str, set[str]] = {}
    for query in queries:
        rule = rules[query.id]
        same_pt = by_pt[rule["product_type"]]
        exact_pool = [pid for pid in same_pt if classify(query.id, pid) == "Exact"]
        sub_pool = [pid for pid in same_pt if pid not in set(exact_pool)]
        irrelevant_pool = [pid for pid in pids_sorted if facts[pid]["product_type"] != rule["product_type"]]
        # Shoppers who settle for a substitute gravitate to lexical bait:
        # titles that show one of the query's constraint words even though
        # the attribute behind the word differs (a copper-colored flask
        # surfacing for a query about a copper bottle).
        query_tokens = set(query.text.split()) - {rule["head_noun"], "for"}
        bait_pool = [
            pid for pid in sub_pool
            if query_tokens & set(products_by_id[pid].title.split())
        ]
        noun_accessories = accessories_by_noun.get(rule["head_noun"], [])

        used: set[str] = set()

        def pick(pool: list[str]) -> str | None:
            available = [pid for pid in pool if pid not in used]
            if not available:
                return None
            return available[int(engagement_rng.integers(0, len(available)))]

        tiers = (
            ["ordered"] * (2 + int(engagement_rng.integers(0, 2)))
            + ["considered"] * (2 + int(engagement_rng.integers(0, 2)))
            + ["seen"] * (3 + int(engagement_rng.integers(0, 2)))
        )
        # Deeper funnel stages tilt toward truly exact products: shoppers
        # who order usually found what they asked for, while browse-only
        # rows skew toward substitutes.
        exact_share = {"ordered": 0.85, "considered": 0.55, "seen": 0.4}
        for tier in tiers:
            is_fp = engagement_rng.random() < config.false_positive_rate
            if is_fp:
                if noun_accessories and engagement_rng.random() < 0.5:
                    pid = pick(noun_accessories) or pick(irrelevant_pool)
                else:
                    pid = pick(irrelevant_pool)
            else:
                if engagement_rng.random() < exact_share[tier]:
                    pid = pick(exact_pool) or pick(sub_pool)
                elif bait_pool and engagement_rng.random() < 0.7:
                    pid = pick(bait_pool) or pick(sub_pool) or pick(exact_pool)
                else:
                    pid = pick(sub_pool) or pick(exact_pool)
            if pid is None:
                continue
            used.add(pid)
            impressions, clicks, atcs, orders = _funnel(tier, engagement_rng)
            engagement.append(
                EngagementRecord(
                    query_id=query.id,
                    product_id=pid,
                    impressions=impressions,
                    clicks=clicks,
                    atcs=atcs,
                    orders=orders,
                )
            )
            if orders > 0:
                purchases.setdefault(query.id, set()).add(pid)

    # Judgments: every engaged pair plus a per-query uniform sample of the
    # rest of the catalog, all labeled by the ground-truth rule.
    judged: list[JudgmentRecord] = []
    engaged_by_query: dict[str, set[str]] = {}
    for rec in engagement:
        engaged_by_query.setdefault(rec.query_id, set()).add(rec.product_id)
    extras_per_query = int(config.judgment_coverage * len(products))
    for query in queries:
        engaged = engaged_by_query.get(query.id, set())
        for pid in sorted(engaged):
            judged.append(JudgmentRecord(query_id=query.id, product_id=pid, klass=classify(query.id, pid)))
        candidates = [pid for pid in pids_sorted if pid not in engaged]
        if extras_per_query and candidates:
            take = min(extras_per_query, len(candidates))
            chosen = judgment_rng.choice(len(candidates), size=take, replace=False)
            for idx in sorted(chosen.tolist()):
                pid = candidates[idx]
                judged.append(
                    JudgmentRecord(query_id=query.id, product_id=pid, klass=classify(query.id, pid))
                )

    # PT predictions: the true type at full score, occasionally with a
    # low-score decoy type (below the semi-positive score threshold).
    pt_predictions: list[PTPrediction] = []
    all_pts = pts + [ACCESSORY_PT]
    for query in queries:
        entries = [(rules[query.id]["product_type"], 1.0)]
        if pt_rng.random() < 0.3:
            others = [pt for pt in all_pts if pt != rules[query.id]["product_type"]]
            entries.append((others[int(pt_rng.integers(0, len(others)))], 0.15))
        pt_predictions.append(PTPrediction(query_id=query.id, entries=tuple(entries)))

    ground_truth = GroundTruth(
        query_rules=rules,
        product_facts=facts,
        purchases={qid: frozenset(pids) for qid, pids in purchases.items()},
    )
    return World(
        config=config,
        queries=queries,
        products=products,
        engagement=engagement,
        judgments=judged,
        pt_predictions=pt_predictions,
        ground_truth=ground_truth,
    )


def corrupt_eval_queries(queries: Sequence[Query], rate: float, seed: int) -> list[Query]:
    """Copy of the query list with about ``rate`` of texts altered by one
    typo each. Ids and weights are preserved so evaluation stays paired.
    Re-draws until the text actually changes (some draws are no-ops, e.g. a
    numeric word), so rate=1 alters every query that has a corruptible
    word."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    config = TypoConfig(injection_probability=1.0)
    out: list[Query] = []
    for query in queries:
        text = query.text
        if rng.random() < rate:
            for _ in range(100):
                candidate = inject_typos(query.text, config, rng)
                if candidate != query.text:
                    text = candidate
                    break
        out.append(Query(id=query.id, text=text, traffic_weight=query.traffic_weight))
    return out
