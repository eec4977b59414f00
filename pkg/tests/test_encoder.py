"""Shared-weight two-tower encoder: hashing, pooling, projection,
normalization, the analytic backward pass, and checkpointing."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from ebrlab.catalog import Product
from ebrlab.encoder import (
    EncoderConfig,
    TowerGrads,
    TowerParams,
    TwoTowerEncoder,
    bucketize,
    cosine,
    embed,
    embed_backward,
    init_params,
    load_checkpoint,
    product_text,
    save_checkpoint,
    token_bucket,
    tokenize,
)


PRODUCT = Product(
    id="p-0",
    title="Acme Red Steel Bottle",
    attributes={"color": "red", "material": "steel"},
    product_type="pt-bottle",
)


class TestTokenization:
    """Lowercased whitespace tokens; products append attribute sentinels."""

    def test_tokenize_lowercases(self):
        assert tokenize("Red STEEL Bottle") == ["red", "steel", "bottle"]

    def test_tokenize_empty(self):
        assert tokenize("   ") == []

    def test_product_text_layout(self):
        tokens = product_text(PRODUCT)
        assert tokens == [
            "acme",
            "red",
            "steel",
            "bottle",
            "[attr:color]",
            "red",
            "[attr:material]",
            "steel",
        ]

    def test_product_text_respects_attribute_order(self):
        flipped = Product(
            id="p-1",
            title="mug",
            attributes={"material": "steel", "color": "red"},
            product_type="pt-mug",
        )
        tokens = product_text(flipped)
        assert tokens.index("[attr:material]") < tokens.index("[attr:color]")


class TestHashing:
    """Token hashing is a fixed public function of the token bytes."""

    def test_bucket_formula(self):
        token = "bottle"
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        expected = int.from_bytes(digest, "little") % 4096
        assert token_bucket(token, 4096) == expected

    def test_buckets_in_range(self):
        rng = np.random.default_rng(2)
        words = ["tok" + str(int(i)) for i in rng.integers(0, 10_000, size=300)]
        buckets = bucketize(words, 512)
        assert buckets.min() >= 0
        assert buckets.max() < 512

    def test_empty_token_list_rejected(self):
        with pytest.raises(ValueError):
            bucketize([], 4096)

    def test_distribution_roughly_uniform(self):
        """Seeded loop: a large vocabulary spreads over buckets without a
        dominant bin."""
        words = [f"word-{i}" for i in range(5000)]
        buckets = bucketize(words, 64)
        counts = np.bincount(buckets, minlength=64)
        assert counts.min() > 0
        assert counts.max() < 3 * 5000 / 64


class TestConfigAndInit:
    """Parameter construction is validated and seeded."""

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(dim=1)
        with pytest.raises(ValueError):
            EncoderConfig(dim=64, hash_buckets=32)
        with pytest.raises(ValueError):
            EncoderConfig(temperature_init=0.0)

    def test_init_shapes_and_determinism(self):
        config = EncoderConfig(dim=8, hash_buckets=64)
        a = init_params(config, seed=4)
        b = init_params(config, seed=4)
        c = init_params(config, seed=5)
        assert a.table.shape == (64, 8)
        assert a.projection.shape == (8, 8)
        assert np.array_equal(a.table, b.table)
        assert not np.array_equal(a.table, c.table)

    def test_projection_starts_near_identity(self):
        params = init_params(EncoderConfig(dim=16, hash_buckets=128), seed=0)
        assert np.abs(params.projection - np.eye(16)).max() < 0.1

    def test_temperatures_exponentiate(self):
        params = init_params(EncoderConfig(dim=8, hash_buckets=64, temperature_init=0.25))
        assert abs(params.sigma - 0.25) < 1e-12
        assert abs(params.tau - 0.25) < 1e-12
        params.log_sigma = 0.0
        assert params.sigma == 1.0

    def test_copy_is_deep(self):
        params = init_params(EncoderConfig(dim=8, hash_buckets=64))
        clone = params.copy()
        clone.table[0, 0] += 1.0
        assert params.table[0, 0] != clone.table[0, 0]

    def test_grads_zeros_like(self):
        params = init_params(EncoderConfig(dim=8, hash_buckets=64))
        grads = TowerGrads.zeros_like(params)
        assert grads.table.shape == params.table.shape
        assert not grads.table.any()
        assert grads.log_sigma == 0.0


class TestEmbedding:
    """Forward pass properties of the shared tower."""

    def params(self, dim=16, buckets=256, seed=3):
        return init_params(EncoderConfig(dim=dim, hash_buckets=buckets), seed=seed)

    def test_unit_norm(self):
        params = self.params()
        vec = embed(params, ["red", "steel", "bottle"])
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-12

    def test_order_invariance(self):
        """Mean pooling ignores token order."""
        params = self.params()
        a = embed(params, ["red", "steel", "bottle"])
        b = embed(params, ["bottle", "red", "steel"])
        assert np.allclose(a, b)

    def test_repetition_changes_embedding(self):
        params = self.params()
        a = embed(params, ["red", "bottle"])
        b = embed(params, ["red", "red", "red", "bottle"])
        assert not np.allclose(a, b)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            embed(self.params(), [])

    def test_cosine_of_identical_inputs_is_one(self):
        params = self.params()
        vec = embed(params, ["red", "bottle"])
        assert abs(cosine(vec, vec) - 1.0) < 1e-12

    def test_cosine_bounded(self):
        """Seeded loop over random word pairs."""
        params = self.params()
        rng = np.random.default_rng(8)
        for _ in range(50):
            a = embed(params, [f"w{int(rng.integers(0, 1000))}" for _ in range(4)])
            b = embed(params, [f"w{int(rng.integers(0, 1000))}" for _ in range(4)])
            assert -1.0 - 1e-12 <= cosine(a, b) <= 1.0 + 1e-12


class TestBackward:
    """Analytic gradients of the embedding match finite differences."""

    def test_table_gradient(self):
        params = init_params(EncoderConfig(dim=6, hash_buckets=32), seed=1)
        tokens = ["red", "steel", "bottle"]
        rng = np.random.default_rng(0)
        upstream = rng.normal(size=6)

        def objective(p):
            return float(np.dot(upstream, embed(p, tokens)))

        grads = embed_backward(params, tokens, upstream)
        eps = 1e-6
        touched = sorted(set(bucketize(tokens, 32).tolist()))
        for bucket in touched:
            for j in range(0, 6, 2):
                up = params.copy()
                up.table[bucket, j] += eps
                down = params.copy()
                down.table[bucket, j] -= eps
                numeric = (objective(up) - objective(down)) / (2 * eps)
                assert abs(numeric - grads.table[bucket, j]) < 1e-6

    def test_projection_gradient(self):
        params = init_params(EncoderConfig(dim=6, hash_buckets=32), seed=1)
        tokens = ["red", "steel", "bottle"]
        rng = np.random.default_rng(1)
        upstream = rng.normal(size=6)

        def objective(p):
            return float(np.dot(upstream, embed(p, tokens)))

        grads = embed_backward(params, tokens, upstream)
        eps = 1e-6
        for i in range(6):
            for j in range(0, 6, 3):
                up = params.copy()
                up.projection[i, j] += eps
                down = params.copy()
                down.projection[i, j] -= eps
                numeric = (objective(up) - objective(down)) / (2 * eps)
                assert abs(numeric - grads.projection[i, j]) < 1e-6

    def test_untouched_buckets_have_zero_gradient(self):
        params = init_params(EncoderConfig(dim=6, hash_buckets=32), seed=1)
        tokens = ["red"]
        grads = embed_backward(params, tokens, np.ones(6))
        touched = set(bucketize(tokens, 32).tolist())
        for bucket in range(32):
            if bucket not in touched:
                assert not grads.table[bucket].any()


class TestTwoTowerEncoder:
    """The estimator wrapper shares weights between both towers."""

    def test_requires_initialization(self):
        with pytest.raises(NotFittedError):
            TwoTowerEncoder().embed_query("red bottle")

    def test_initialize_deterministic(self):
        a = TwoTowerEncoder(dim=8, hash_buckets=64, seed=9).initialize()
        b = TwoTowerEncoder(dim=8, hash_buckets=64, seed=9).initialize()
        assert np.array_equal(a.params_.table, b.params_.table)

    def test_query_and_product_towers_share_weights(self):
        encoder = TwoTowerEncoder(dim=8, hash_buckets=64, seed=0).initialize()
        text_vec = encoder.embed_query("acme red steel bottle")
        tokens_vec = encoder.transform([["acme", "red", "steel", "bottle"]])[0]
        assert np.allclose(text_vec, tokens_vec)

    def test_product_embedding_includes_attributes(self):
        encoder = TwoTowerEncoder(dim=8, hash_buckets=64, seed=0).initialize()
        product_vec = encoder.embed_product(PRODUCT)
        title_only = encoder.embed_query(PRODUCT.title)
        assert not np.allclose(product_vec, title_only)
        assert np.allclose(product_vec, encoder.transform([product_text(PRODUCT)])[0])

    def test_transform_batch_matches_single(self):
        encoder = TwoTowerEncoder(dim=8, hash_buckets=64, seed=0).initialize()
        texts = ["red bottle", "steel mug", "oak desk for kids"]
        batch = encoder.transform(texts)
        assert batch.shape == (3, 8)
        for i, text in enumerate(texts):
            assert np.allclose(batch[i], encoder.embed_query(text))

    def test_sklearn_param_interface(self):
        encoder = TwoTowerEncoder(dim=8, hash_buckets=64)
        params = encoder.get_params()
        assert params["dim"] == 8
        encoder.set_params(dim=16, hash_buckets=128)
        assert encoder.config.dim == 16


class TestCheckpoint:
    """Checkpoints restore the exact weights and reject foreign formats."""

    def test_roundtrip(self, tmp_path):
        encoder = TwoTowerEncoder(dim=8, hash_buckets=64, seed=2).initialize()
        encoder.params_.log_sigma = math.log(0.07)
        path = tmp_path / "encoder.json"
        save_checkpoint(encoder, path)
        restored = load_checkpoint(path)
        assert np.array_equal(restored.params_.table, encoder.params_.table)
        assert np.array_equal(restored.params_.projection, encoder.params_.projection)
        assert restored.params_.log_sigma == encoder.params_.log_sigma
        query = "red steel bottle"
        assert np.allclose(restored.embed_query(query), encoder.embed_query(query))

    def test_unfitted_cannot_save(self, tmp_path):
        with pytest.raises(NotFittedError):
            save_checkpoint(TwoTowerEncoder(), tmp_path / "x.json")

    def test_version_guard(self, tmp_path):
        encoder = TwoTowerEncoder(dim=8, hash_buckets=64).initialize()
        path = tmp_path / "encoder.json"
        save_checkpoint(encoder, path)
        path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 7'))
        with pytest.raises(ValueError):
            load_checkpoint(path)
