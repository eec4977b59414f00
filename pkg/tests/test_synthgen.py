"""Synthetic world generation: shape, recoverable ground truth, and the
statistical knobs (false positives, catalog incompleteness, judgments)."""

from __future__ import annotations

import numpy as np
import pytest

from ebrlab.catalog import RELEVANCE_CLASSES
from ebrlab.synthgen import (
    ACCESSORY_PT,
    GroundTruth,
    VocabConfig,
    WorldConfig,
    corrupt_eval_queries,
    generate_world,
)


class TestConfigs:
    """Configuration invariants reject out-of-range knobs early."""

    def test_default_world_shape_counts(self):
        cfg = WorldConfig()
        assert cfg.num_product_types * cfg.products_per_type == 1920
        assert cfg.num_queries == 500

    def test_rates_validated(self):
        for bad in ({"false_positive_rate": 1.5}, {"misspell_rate": -0.1},
                    {"judgment_coverage": 2.0}, {"attribute_dropout": -0.2}):
            with pytest.raises(ValueError):
                WorldConfig(**bad)

    def test_vocab_bounds(self):
        with pytest.raises(ValueError):
            VocabConfig(num_colors=1)
        with pytest.raises(ValueError):
            VocabConfig(num_brands=10_000)


class TestWorldShape:
    """The default world has the documented size and id scheme."""

    def test_product_count(self, default_world):
        """16 types of 120 products plus 16 x 5 accessories is 2000 rows."""
        assert len(default_world.products) == 2000

    def test_query_count(self, default_world):
        assert len(default_world.queries) == 500

    def test_ids_unique(self, default_world):
        pids = [p.id for p in default_world.products]
        qids = [q.id for q in default_world.queries]
        assert len(set(pids)) == len(pids)
        assert len(set(qids)) == len(qids)

    def test_engagement_references_resolve(self, default_world):
        """Every engagement row points at an existing query and product."""
        qids = {q.id for q in default_world.queries}
        pids = {p.id for p in default_world.products}
        for rec in default_world.engagement:
            assert rec.query_id in qids
            assert rec.product_id in pids

    def test_funnel_ordering_holds(self, default_world):
        """Counts never increase down the funnel within a row."""
        for rec in default_world.engagement:
            assert rec.impressions >= rec.clicks >= rec.atcs >= rec.orders

    def test_every_query_engaged(self, default_world):
        engaged = {rec.query_id for rec in default_world.engagement}
        assert engaged == {q.id for q in default_world.queries}

    def test_accessories_have_own_type(self, default_world):
        accessories = [p for p in default_world.products if p.id.startswith("p-acc-")]
        assert len(accessories) == 80
        assert {p.product_type for p in accessories} == {ACCESSORY_PT}


class TestGroundTruthRules:
    """Relevance is a pure function of the recorded latent facts: same type
    and head noun and all constraints satisfied means Exact; same type
    otherwise means Substitute; a different type means Irrelevant."""

    def test_classes_complete(self, default_world):
        """Spot-check that every emitted class is one of the three."""
        gt = default_world.ground_truth
        rng = np.random.default_rng(0)
        pids = [p.id for p in default_world.products]
        for q in default_world.queries[:50]:
            for pid in rng.choice(pids, size=20, replace=False):
                assert gt.relevance(q.id, str(pid)) in RELEVANCE_CLASSES

    def test_every_query_has_an_exact(self, default_world):
        """The generator retries templates until the query matches at least
        one product, so the golden set is never empty."""
        gt = default_world.ground_truth
        for q in default_world.queries:
            assert len(gt.exact_ids(q.id)) >= 1

    def test_exact_ids_match_relevance(self, default_world):
        gt = default_world.ground_truth
        for q in default_world.queries[:25]:
            exacts = gt.exact_ids(q.id)
            for pid in list(exacts)[:5]:
                assert gt.relevance(q.id, pid) == "Exact"

    def test_unknown_ids_raise(self, default_world):
        gt = default_world.ground_truth
        with pytest.raises(KeyError):
            gt.relevance("q-nope", default_world.products[0].id)
        with pytest.raises(KeyError):
            gt.relevance(default_world.queries[0].id, "p-nope")

    def test_accessories_irrelevant_to_typed_queries(self, default_world):
        """Accessory items share title words with main products but belong
        to their own type, so they are Irrelevant for every generated
        query."""
        gt = default_world.ground_truth
        acc_ids = [p.id for p in default_world.products if p.product_type == ACCESSORY_PT]
        for q in default_world.queries[:40]:
            for pid in acc_ids[:10]:
                assert gt.relevance(q.id, pid) == "Irrelevant"

    def test_latent_attributes_backfill_missing_catalog_fields(self, default_world):
        """Products drop an attribute from the catalog row at the configured
        rate, but the recorded facts keep the full assignment, so ground
        truth can still call such a product Exact."""
        gt = default_world.ground_truth
        products_by_id = {p.id: p for p in default_world.products}
        incomplete = [
            pid
            for pid, fact in gt.product_facts.items()
            if len(products_by_id[pid].attributes) < len(fact["attributes"])
        ]
        frac = len(incomplete) / len(default_world.products)
        assert 0.4 < frac < 0.65
        for pid in incomplete[:20]:
            fact = gt.product_facts[pid]
            missing = set(fact["attributes"]) - set(products_by_id[pid].attributes)
            assert len(missing) == 1
            hidden = missing.pop()
            value = fact["attributes"][hidden]
            observed = products_by_id[pid]
            assert hidden not in observed.attributes
            if hidden != "audience":
                assert value not in observed.title.split() or value in observed.attributes.values()


class TestEngagementStatistics:
    """Engagement noise and tier structure follow the configured rates."""

    def test_false_positive_fraction_near_rate(self, world_cache):
        """Among rows with orders, the fraction of ground-truth Irrelevant
        products tracks the configured false positive rate."""
        for fpr in (0.1, 0.2):
            world = world_cache(seed=9, false_positive_rate=fpr)
            gt = world.ground_truth
            ordered = [r for r in world.engagement if r.orders > 0]
            bad = sum(gt.relevance(r.query_id, r.product_id) == "Irrelevant" for r in ordered)
            assert abs(bad / len(ordered) - fpr) < 0.05

    def test_purchases_recorded_for_ordered_rows(self, default_world):
        """Ground truth purchase sets are exactly the products with orders."""
        gt = default_world.ground_truth
        from_engagement: dict[str, set[str]] = {}
        for rec in default_world.engagement:
            if rec.orders > 0:
                from_engagement.setdefault(rec.query_id, set()).add(rec.product_id)
        for qid, pids in from_engagement.items():
            assert gt.purchased_ids(qid) == pids

    def test_ordered_rows_skew_exact(self, default_world):
        """Purchase rows point at Exact products far more often than
        browse-only rows do."""
        gt = default_world.ground_truth

        def exact_rate(rows):
            hits = sum(gt.relevance(r.query_id, r.product_id) == "Exact" for r in rows)
            return hits / len(rows)

        ordered = [r for r in default_world.engagement if r.orders > 0]
        browsed = [r for r in default_world.engagement if r.orders == 0 and r.atcs == 0]
        assert exact_rate(ordered) > exact_rate(browsed) + 0.2


class TestJudgments:
    """Judgment rows are noiseless readings of ground truth over the engaged
    pairs plus per-query random coverage extras."""

    def test_judgments_noiseless(self, default_world):
        gt = default_world.ground_truth
        for j in default_world.judgments:
            assert j.klass == gt.relevance(j.query_id, j.product_id)

    def test_engaged_pairs_all_judged(self, default_world):
        judged = {(j.query_id, j.product_id) for j in default_world.judgments}
        for rec in default_world.engagement:
            assert (rec.query_id, rec.product_id) in judged

    def test_all_three_classes_present(self, default_world):
        classes = {j.klass for j in default_world.judgments}
        assert classes == set(RELEVANCE_CLASSES)


class TestPTPredictions:
    """Predicted type sets contain the true type at full score plus an
    occasional lower-scored decoy."""

    def test_true_type_always_first(self, default_world):
        rules = default_world.ground_truth.query_rules
        for pred in default_world.pt_predictions:
            true_pt = rules[pred.query_id]["product_type"]
            assert pred.entries[0] == (true_pt, 1.0)

    def test_decoy_fraction(self, default_world):
        with_decoy = [p for p in default_world.pt_predictions if len(p.entries) == 2]
        frac = len(with_decoy) / len(default_world.pt_predictions)
        assert 0.2 < frac < 0.4
        for pred in with_decoy[:20]:
            assert pred.entries[1][1] == 0.15


class TestDeterminism:
    """Same seed, same world; different seed, different world."""

    def test_same_seed_identical(self):
        a = generate_world(WorldConfig(seed=123, num_product_types=3, products_per_type=20,
                                       num_queries=30))
        b = generate_world(WorldConfig(seed=123, num_product_types=3, products_per_type=20,
                                       num_queries=30))
        assert [p.to_dict() for p in a.products] == [p.to_dict() for p in b.products]
        assert [q.to_dict() for q in a.queries] == [q.to_dict() for q in b.queries]
        assert [r.to_dict() for r in a.engagement] == [r.to_dict() for r in b.engagement]
        assert [j.to_dict() for j in a.judgments] == [j.to_dict() for j in b.judgments]

    def test_seed_changes_world(self):
        a = generate_world(WorldConfig(seed=1, num_product_types=3, products_per_type=20,
                                       num_queries=30))
        b = generate_world(WorldConfig(seed=2, num_product_types=3, products_per_type=20,
                                       num_queries=30))
        assert [p.to_dict() for p in a.products] != [p.to_dict() for p in b.products]


class TestSaveLoad:
    """A saved world round-trips through its six files."""

    def test_ground_truth_roundtrip(self, tmp_path):
        world = generate_world(WorldConfig(seed=5, num_product_types=2, products_per_type=10,
                                           num_queries=12))
        path = tmp_path / "ground_truth.jsonl"
        world.ground_truth.save(path)
        restored = GroundTruth.load(path)
        for q in world.queries:
            assert restored.exact_ids(q.id) == world.ground_truth.exact_ids(q.id)
            assert restored.purchased_ids(q.id) == world.ground_truth.purchased_ids(q.id)
        pid = world.products[0].id
        assert restored.relevance(world.queries[0].id, pid) == world.ground_truth.relevance(
            world.queries[0].id, pid
        )

    def test_world_save_writes_six_files(self, tmp_path):
        world = generate_world(WorldConfig(seed=5, num_product_types=2, products_per_type=10,
                                           num_queries=12))
        world.save(tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == [
            "engagement.jsonl",
            "ground_truth.jsonl",
            "judgments.jsonl",
            "products.jsonl",
            "pt_predictions.jsonl",
            "queries.jsonl",
        ]


class TestCorruptEvalQueries:
    """Eval-side corruption flips a controlled fraction of query texts while
    preserving ids and weights."""

    def test_rate_one_changes_every_text(self, default_world):
        corrupted = corrupt_eval_queries(default_world.queries, 1.0, seed=3)
        changed = sum(
            c.text != q.text for c, q in zip(corrupted, default_world.queries)
        )
        assert changed == len(default_world.queries)

    def test_rate_zero_changes_nothing(self, default_world):
        corrupted = corrupt_eval_queries(default_world.queries, 0.0, seed=3)
        assert [c.text for c in corrupted] == [q.text for q in default_world.queries]

    def test_partial_rate_fraction(self, default_world):
        """Seeded loop: the changed fraction concentrates near the rate."""
        for seed in range(3):
            corrupted = corrupt_eval_queries(default_world.queries, 0.3, seed=seed)
            changed = sum(
                c.text != q.text for c, q in zip(corrupted, default_world.queries)
            )
            assert 0.22 < changed / len(corrupted) < 0.38

    def test_ids_and_weights_preserved(self, default_world):
        corrupted = corrupt_eval_queries(default_world.queries, 1.0, seed=3)
        assert [c.id for c in corrupted] == [q.id for q in default_world.queries]
        assert [c.traffic_weight for c in corrupted] == [
            q.traffic_weight for q in default_world.queries
        ]

    def test_deterministic(self, default_world):
        a = corrupt_eval_queries(default_world.queries, 0.5, seed=11)
        b = corrupt_eval_queries(default_world.queries, 0.5, seed=11)
        assert [c.text for c in a] == [c.text for c in b]
