"""Siamese two-tower text encoder.

Queries and products share one set of weights: hashed token embeddings are
mean-pooled, passed through a square projection, and L2-normalized, so the
score of a pair is the dot product of two unit vectors. Both loss
temperatures live here as log-parameters, which keeps them positive under
unconstrained gradient updates.

Token hashing is fixed and documented: ``blake2b(token_utf8, digest_size=8)``
interpreted little-endian, modulo the bucket count. Collisions are permitted
and harmless.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .catalog import Product

CHECKPOINT_FORMAT_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokens."""
    return text.lower().split()


def product_text(product: Product) -> list[str]:
    """Token list for a product: title tokens, then per attribute (in map
    order) a sentinel ``[attr:<name>]`` followed by the value's tokens."""
    tokens = tokenize(product.title)
    for name, value in product.attributes.items():
        tokens.append(f"[attr:{name}]")
        tokens.extend(tokenize(value))
    return tokens


def token_bucket(token: str, hash_buckets: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % hash_buckets


def bucketize(tokens: list[str], hash_buckets: int) -> np.ndarray:
    if not tokens:
        raise ValueError("cannot embed an empty token list")
    return np.array([token_bucket(t, hash_buckets) for t in tokens], dtype=np.int64)


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 32
    hash_buckets: int = 4096
    temperature_init: float = 0.1

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.hash_buckets < self.dim:
            raise ValueError(f"hash_buckets must be >= dim, got {self.hash_buckets}")
        if self.temperature_init <= 0:
            raise ValueError(f"temperature_init must be > 0, got {self.temperature_init}")


@dataclass
class TowerParams:
    """Shared tower weights plus the two trained temperatures."""

    table: np.ndarray  # (hash_buckets, dim)
    projection: np.ndarray  # (dim, dim)
    log_sigma: float
    log_tau: float

    @property
    def sigma(self) -> float:
        return math.exp(self.log_sigma)

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @property
    def hash_buckets(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def copy(self) -> "TowerParams":
        return TowerParams(self.table.copy(), self.projection.copy(), self.log_sigma, self.log_tau)


@dataclass
class TowerGrads:
    """Gradients with the same shapes as :class:`TowerParams`."""

    table: np.ndarray
    projection: np.ndarray
    log_sigma: float = 0.0
    log_tau: float = 0.0

    @classmethod
    def zeros_like(cls, params: TowerParams) -> "TowerGrads":
        return cls(np.zeros_like(params.table), np.zeros_like(params.projection))


def init_params(config: EncoderConfig, seed: int = 0) -> TowerParams:
    """Embedding table i.i.d. uniform in [-0.05, 0.05]; projection is the
    identity plus small Gaussian noise. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.05, 0.05, size=(config.hash_buckets, config.dim))
    projection = np.eye(config.dim) + 0.01 * rng.standard_normal((config.dim, config.dim))
    log_temp = math.log(config.temperature_init)
    return TowerParams(table=table, projection=projection, log_sigma=log_temp, log_tau=log_temp)


@dataclass
class _BatchCache:
    buckets: np.ndarray  # concatenated bucket ids
    segment: np.ndarray  # row index per bucket id
    counts: np.ndarray  # tokens per row
    pooled: np.ndarray  # (n, dim) mean-pooled table rows
    projected: np.ndarray  # (n, dim) pooled @ projection
    norms: np.ndarray  # (n,)
    embeddings: np.ndarray  # (n, dim) unit rows


def embed_batch(params: TowerParams, bucket_lists: list[np.ndarray]) -> _BatchCache:
    """Forward pass for many token lists at once; returns the cache needed
    by :func:`embed_batch_backward`."""
    n = len(bucket_lists)
    dim = params.dim
    counts = np.array([len(b) for b in bucket_lists], dtype=np.int64)
    if np.any(counts == 0):
        raise ValueError("cannot embed an empty token list")
    buckets = np.concatenate(bucket_lists) if n else np.empty(0, dtype=np.int64)
    segment = np.repeat(np.arange(n), counts)
    pooled = np.zeros((n, dim))
    np.add.at(pooled, segment, params.table[buckets])
    pooled /= counts[:, None]
    projected = pooled @ params.projection
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate zero-norm embedding")
    embeddings = projected / norms[:, None]
    return _BatchCache(buckets, segment, counts, pooled, projected, norms, embeddings)


def embed_batch_backward(
    params: TowerParams, cache: _BatchCache, grad_embeddings: np.ndarray
) -> TowerGrads:
    """Backprop through normalization, projection, pooling, and lookup."""
    # d/dz of z/|z| applied to g: (g - (g.e) e) / |z|
    dot = np.sum(grad_embeddings * cache.embeddings, axis=1, keepdims=True)
    grad_projected = (grad_embeddings - dot * cache.embeddings) / cache.norms[:, None]
    grad_projection = cache.pooled.T @ grad_projected
    grad_pooled = grad_projected @ params.projection.T
    grad_pooled = grad_pooled / cache.counts[:, None]
    grad_table = np.zeros_like(params.table)
    np.add.at(grad_table, cache.buckets, grad_pooled[cache.segment])
    return TowerGrads(table=grad_table, projection=grad_projection)


def embed(params: TowerParams, tokens: list[str]) -> np.ndarray:
    """Unit-norm embedding of one token list. Deterministic in
    (params, tokens); order-invariant because pooling is a mean."""
    buckets = bucketize(tokens, params.hash_buckets)
    return embed_batch(params, [buckets]).embeddings[0]


def embed_backward(params: TowerParams, tokens: list[str], grad_output: np.ndarray) -> TowerGrads:
    """Analytic parameter gradients of ``embed`` for one input, given the
    upstream gradient w.r.t. the output vector."""
    buckets = bucketize(tokens, params.hash_buckets)
    cache = embed_batch(params, [buckets])
    return embed_batch_backward(params, cache, np.asarray(grad_output, dtype=float)[None, :])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of two unit-norm embeddings; in [-1, 1]."""
    return float(np.dot(a, b))


class TwoTowerEncoder(BaseEstimator):
    """Sklearn-style wrapper around the shared tower weights.

    ``initialize()`` gives deterministic starting weights; ``fit`` trains
    them on a labeled dataset (see :mod:`ebrlab.training`); ``transform``
    maps texts, token lists, or products to unit-norm embedding rows.
    """

    def __init__(self, dim: int = 32, hash_buckets: int = 4096, temperature_init: float = 0.1, seed: int = 0):
        self.dim = dim
        self.hash_buckets = hash_buckets
        self.temperature_init = temperature_init
        self.seed = seed

    @property
    def config(self) -> EncoderConfig:
        return EncoderConfig(dim=self.dim, hash_buckets=self.hash_buckets, temperature_init=self.temperature_init)

    def initialize(self) -> "TwoTowerEncoder":
        self.params_ = init_params(self.config, self.seed)
        return self

    def _check_params(self) -> TowerParams:
        if not hasattr(self, "params_"):
            raise NotFittedError("encoder has no parameters; call initialize() or fit() first")
        return self.params_

    def fit(self, dataset, config=None, **kwargs) -> "TwoTowerEncoder":
        """Train the towers; see :func:`ebrlab.training.train` for the loop."""
        from .training import TrainConfig, train

        if not hasattr(self, "params_"):
            self.initialize()
        result = train(dataset, self, config or TrainConfig(**kwargs))
        self.loss_curve_ = result.curve
        return self

    def _to_buckets(self, item) -> np.ndarray:
        if isinstance(item, Product):
            tokens = product_text(item)
        elif isinstance(item, str):
            tokens = tokenize(item)
        else:
            tokens = list(item)
        return bucketize(tokens, self.hash_buckets)

    def transform(self, items) -> np.ndarray:
        """Embed a sequence of strings, token lists, or products into a
        (len(items), dim) matrix of unit rows."""
        params = self._check_params()
        bucket_lists = [self._to_buckets(item) for item in items]
        return embed_batch(params, bucket_lists).embeddings

    def embed_query(self, text: str) -> np.ndarray:
        return self.transform([text])[0]

    def embed_product(self, product: Product) -> np.ndarray:
        return self.transform([product])[0]


def save_checkpoint(encoder: TwoTowerEncoder, path: str | Path) -> None:
    params = encoder._check_params()
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": {
            "dim": encoder.dim,
            "hash_buckets": encoder.hash_buckets,
            "temperature_init": encoder.temperature_init,
            "seed": encoder.seed,
        },
        "table": params.table.ravel().tolist(),
        "projection": params.projection.ravel().tolist(),
        "log_sigma": params.log_sigma,
        "log_tau": params.log_tau,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> TwoTowerEncoder:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {version!r}")
    cfg = payload["config"]
    encoder = TwoTowerEncoder(
        dim=cfg["dim"],
        hash_buckets=cfg["hash_buckets"],
        temperature_init=cfg["temperature_init"],
        seed=cfg.get("seed", 0),
    )
    dim, buckets = cfg["dim"], cfg["hash_buckets"]
    encoder.params_ = TowerParams(
        table=np.array(payload["table"], dtype=float).reshape(buckets, dim),
        projection=np.array(payload["projection"], dtype=float).reshape(dim, dim),
        log_sigma=float(payload["log_sigma"]),
        log_tau=float(payload["log_tau"]),
    )
    return encoder
