"""Multi-objective training for the two-tower encoder.

One training example is a query plus a stratified sample of its labeled
products. The loss is a weighted mix of two listwise softmax
cross-entropies over the example's query-product cosines: one against the
normalized engagement labels (temperature sigma), one against the
normalized relevance labels (temperature tau). Both temperatures are
trained alongside the towers, parameterized by their logs so they stay
positive. Batches append in-batch negatives drawn from other examples'
products. All gradients are analytic; the optimizer is Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import TypoConfig, inject_typos
from .catalog import Product, Query, ValidationError
from .encoder import (
    TowerParams,
    TwoTowerEncoder,
    bucketize,
    embed_batch,
    embed_batch_backward,
    product_text,
    tokenize,
)
from .labeling import LabeledPair, RelevanceParams
from .mining import MiningConfig, MiningVerdict, merge_mined, mine_for_query

BUCKET_QUOTAS = (4, 1, 2, 3)
CANDIDATE_ORIGINS = ("engaged", "offline-negative", "semi-positive", "in-batch-negative")


@dataclass(frozen=True)
class TrainConfig:
    products_per_query: int = 10
    quotas: tuple[int, int, int, int] = BUCKET_QUOTAS
    in_batch_k: int = 5
    batch_size: int = 72
    learning_rate: float = 1e-3
    omega: float = 0.5
    epochs: int = 5
    ance_iterations: int = 1
    seed: int = 0
    typos: TypoConfig | None = None

    def __post_init__(self):
        if self.products_per_query < 1:
            raise ValueError("products_per_query must be >= 1")
        if len(self.quotas) != 4 or any(q < 0 for q in self.quotas):
            raise ValueError("quotas must be four non-negative counts")
        if sum(self.quotas) != self.products_per_query:
            raise ValueError(
                f"quotas {self.quotas} must sum to products_per_query={self.products_per_query}"
            )
        if self.in_batch_k < 0:
            raise ValueError("in_batch_k must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.ance_iterations < 1:
            raise ValueError("ance_iterations must be >= 1")


@dataclass(frozen=True)
class LabeledCandidate:
    product_id: str
    s_revised: float
    r: float
    origin: str = "engaged"

    def __post_init__(self):
        if self.s_revised < 0 or self.r < 0:
            raise ValueError("labels must be non-negative")
        if self.origin not in CANDIDATE_ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.origin == "offline-negative" and self.s_revised != 0:
            raise ValueError("offline negatives must carry a zero engagement label")


@dataclass(frozen=True)
class TrainingExample:
    query_id: str
    candidates: tuple[LabeledCandidate, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("an example needs at least one candidate")
        ids = [c.product_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate candidate products for query {self.query_id!r}")
        if not any(c.s_revised > 0 for c in self.candidates):
            raise ValueError(f"query {self.query_id!r} has no positive candidate")


class TrainingDataset:
    """Queries, the full product pool, and the labeled pairs to learn from."""

    def __init__(
        self,
        queries: Sequence[Query],
        products: Sequence[Product],
        pairs: Sequence[LabeledPair],
    ):
        if not queries or not products:
            raise ValidationError("dataset needs queries and products")
        if not pairs:
            raise ValidationError("dataset has no labeled pairs")
        self.queries = tuple(queries)
        self.products = tuple(products)
        self.pairs = tuple(pairs)
        self.queries_by_id = {q.id: q for q in self.queries}
        self.products_by_id = {p.id: p for p in self.products}
        for pair in self.pairs:
            if pair.query_id not in self.queries_by_id:
                raise ValidationError(f"labeled pair references unknown query {pair.query_id!r}")
            if pair.product_id not in self.products_by_id:
                raise ValidationError(f"labeled pair references unknown product {pair.product_id!r}")


def engagement_bucket(s: float) -> int:
    """Bucket index for a positive revised engagement label: 0 for [1, inf),
    1 for [0.1, 1), 2 for (0, 0.1). Zero belongs to the negatives pool, not
    a bucket."""
    if s <= 0:
        raise ValueError(f"positive engagement label required, got {s}")
    if s >= 1.0:
        return 0
    if s >= 0.1:
        return 1
    return 2


def stratified_sample(
    candidates: Sequence[LabeledCandidate],
    negatives: Sequence[LabeledCandidate],
    rng: np.random.Generator,
    quotas: tuple[int, int, int, int] = BUCKET_QUOTAS,
) -> list[LabeledCandidate] | None:
    """Per-query candidate selection under per-bucket quotas.

    ``candidates`` carry positive engagement labels and fill the three label
    buckets; ``negatives`` (zero label) fill the last quota. A bucket's
    unfilled quota cascades to the next lower bucket and finally to the
    negatives, so strongly-engaged products are never crowded out by weak
    ones. Returns ``None`` when the query has no positive at all. Selection
    within a bucket is uniform without replacement; candidates are bucketed
    in product-id order so the draw does not depend on input row order.
    """
    ids = [c.product_id for c in candidates] + [n.product_id for n in negatives]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate product ids across candidate pools")
    buckets: list[list[LabeledCandidate]] = [[], [], [], []]
    for cand in sorted(candidates, key=lambda c: c.product_id):
        buckets[engagement_bucket(cand.s_revised)].append(cand)
    for neg in sorted(negatives, key=lambda c: c.product_id):
        if neg.s_revised != 0:
            raise ValidationError(f"negatives pool contains a positive label on {neg.product_id!r}")
        buckets[3].append(neg)
    if not (buckets[0] or buckets[1] or buckets[2]):
        return None
    picked: list[LabeledCandidate] = []
    carry = 0
    for bucket, quota in zip(buckets, quotas):
        want = quota + carry
        take = min(want, len(bucket))
        if take:
            chosen = rng.permutation(len(bucket))[:take]
            picked.extend(bucket[j] for j in sorted(chosen))
        carry = want - take
    return picked


def build_examples(
    pairs: Sequence[LabeledPair], config: TrainConfig, rng: np.random.Generator
) -> list[TrainingExample]:
    """Group labeled pairs by query (first-appearance order) and apply
    stratified sampling. Queries without a positive are dropped."""
    grouped: dict[str, tuple[list[LabeledCandidate], list[LabeledCandidate]]] = {}
    for pair in pairs:
        positives, negatives = grouped.setdefault(pair.query_id, ([], []))
        origin = pair.origin if pair.origin in CANDIDATE_ORIGINS else "engaged"
        cand = LabeledCandidate(
            product_id=pair.product_id, s_revised=pair.s_revised, r=pair.r, origin=origin
        )
        (positives if cand.s_revised > 0 else negatives).append(cand)
    examples = []
    for query_id, (positives, negatives) in grouped.items():
        sampled = stratified_sample(positives, negatives, rng, config.quotas)
        if sampled is not None:
            examples.append(TrainingExample(query_id=query_id, candidates=tuple(sampled)))
    return examples


def normalize_labels(values: Sequence[float]) -> np.ndarray:
    """Scale non-negative labels into a distribution. Errors on an all-zero
    or negative vector rather than inventing mass."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-d label vector")
    if np.any(arr < 0):
        raise ValueError("labels must be non-negative")
    total = arr.sum()
    if total <= 0:
        raise ValueError("cannot normalize an all-zero label vector")
    return arr / total


def _softmax_ce(
    cosines: np.ndarray, targets: np.ndarray, temperature: float
) -> tuple[float, np.ndarray, float]:
    """Listwise soft-target cross-entropy at a temperature.

    Returns (loss, d loss / d cosines, d loss / d log temperature). A
    zero-mass target vector means the objective is skipped for this
    example: zero loss and zero gradients.
    """
    u = cosines / temperature
    log_q = u - (u.max() + math.log(np.exp(u - u.max()).sum()))
    loss = -float(targets @ log_q)
    mass = float(targets.sum())
    d_u = mass * np.exp(log_q) - targets
    d_cos = d_u / temperature
    d_log_temp = -float(d_u @ u)
    return loss, d_cos, d_log_temp


def _check_loss_inputs(
    query_embedding: np.ndarray, candidate_embeddings: np.ndarray, weights: np.ndarray, temperature: float
) -> None:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if len(weights) != len(candidate_embeddings):
        raise ValueError("one weight per candidate required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be a simplex (non-negative, summing to 1 within 1e-9)")


def loss_eng(
    query_embedding: np.ndarray,
    candidate_embeddings: np.ndarray,
    weights: Sequence[float],
    sigma: float,
) -> float:
    """Engagement-side listwise softmax loss for one example: the
    cross-entropy between the normalized engagement labels and the softmax
    of cosines at temperature sigma."""
    weights = np.asarray(weights, dtype=float)
    candidate_embeddings = np.asarray(candidate_embeddings, dtype=float)
    _check_loss_inputs(query_embedding, candidate_embeddings, weights, sigma)
    loss, _, _ = _softmax_ce(candidate_embeddings @ query_embedding, weights, sigma)
    return loss


def loss_rel(
    query_embedding: np.ndarray,
    candidate_embeddings: np.ndarray,
    weights: Sequence[float],
    tau: float,
) -> float:
    """Relevance-side listwise softmax loss; same structure as the
    engagement loss with its own temperature tau."""
    weights = np.asarray(weights, dtype=float)
    candidate_embeddings = np.asarray(candidate_embeddings, dtype=float)
    _check_loss_inputs(query_embedding, candidate_embeddings, weights, tau)
    loss, _, _ = _softmax_ce(candidate_embeddings @ query_embedding, weights, tau)
    return loss


def loss_total(loss_eng_value: float, loss_rel_value: float, omega: float) -> float:
    """Convex mix of the two listwise losses; omega=1 is engagement-only."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    return omega * loss_eng_value + (1.0 - omega) * loss_rel_value


def in_batch_negatives(
    batch_candidate_ids: Sequence[Sequence[str]],
    query_embeddings: np.ndarray,
    product_embeddings: dict[str, np.ndarray],
    k: int,
) -> list[list[str]]:
    """For each example, the k most query-similar products taken from the
    other examples in the batch, excluding products the example already
    has. Ties break on ascending product id. A short batch yields fewer
    than k (callers can detect this from the list length)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    out: list[list[str]] = []
    for i, own in enumerate(batch_candidate_ids):
        own_set = set(own)
        pool = sorted(
            {pid for j, ids in enumerate(batch_candidate_ids) if j != i for pid in ids} - own_set
        )
        if k == 0 or not pool:
            out.append([])
            continue
        scores = np.array([product_embeddings[pid] @ query_embeddings[i] for pid in pool])
        order = np.lexsort((np.arange(len(pool)), -scores))
        out.append([pool[j] for j in order[:k]])
    return out


@dataclass
class AssembledBatch:
    """A batch frozen for one gradient step: token buckets for each query
    and candidate list, plus target distributions. In-batch negative
    selection already happened, so the loss below is a fixed function of
    the tower parameters."""

    query_buckets: list[np.ndarray]
    candidate_buckets: list[list[np.ndarray]]
    candidate_ids: list[list[str]]
    targets_eng: list[np.ndarray]
    targets_rel: list[np.ndarray]
    short_examples: int = 0

    @property
    def size(self) -> int:
        return len(self.query_buckets)


def assemble_batch(
    params: TowerParams,
    examples: Sequence[TrainingExample],
    products_by_id: dict[str, Product],
    query_texts: dict[str, str],
    config: TrainConfig,
) -> AssembledBatch:
    """Embed the batch once with the current parameters, pick in-batch
    negatives, and freeze candidate lists plus normalized targets. Appended
    negatives carry zero target mass on both objectives."""
    hash_buckets = params.hash_buckets
    query_buckets = [bucketize(tokenize(query_texts[ex.query_id]), hash_buckets) for ex in examples]
    own_ids = [[c.product_id for c in ex.candidates] for ex in examples]

    distinct = sorted({pid for ids in own_ids for pid in ids})
    buckets_by_pid = {
        pid: bucketize(product_text(products_by_id[pid]), hash_buckets) for pid in distinct
    }
    cache = embed_batch(params, query_buckets + [buckets_by_pid[pid] for pid in distinct])
    query_embs = cache.embeddings[: len(examples)]
    product_embs = {pid: cache.embeddings[len(examples) + i] for i, pid in enumerate(distinct)}

    extra_ids = in_batch_negatives(own_ids, query_embs, product_embs, config.in_batch_k)

    candidate_buckets, candidate_ids, targets_eng, targets_rel = [], [], [], []
    short = 0
    for ex, extras in zip(examples, extra_ids):
        if len(extras) < config.in_batch_k:
            short += 1
        ids = [c.product_id for c in ex.candidates] + extras
        s_vec = np.array([c.s_revised for c in ex.candidates], dtype=float)
        r_vec = np.array([c.r for c in ex.candidates], dtype=float)
        pad = np.zeros(len(extras))
        t_eng = np.concatenate([normalize_labels(s_vec), pad])
        t_rel = (
            np.concatenate([r_vec / r_vec.sum(), pad]) if r_vec.sum() > 0 else np.zeros(len(ids))
        )
        candidate_ids.append(ids)
        candidate_buckets.append([buckets_by_pid[pid] for pid in ids])
        targets_eng.append(t_eng)
        targets_rel.append(t_rel)
    return AssembledBatch(
        query_buckets=query_buckets,
        candidate_buckets=candidate_buckets,
        candidate_ids=candidate_ids,
        targets_eng=targets_eng,
        targets_rel=targets_rel,
        short_examples=short,
    )


@dataclass
class FullGrads:
    table: np.ndarray
    projection: np.ndarray
    log_sigma: float
    log_tau: float


@dataclass(frozen=True)
class BatchStats:
    loss_total: float
    loss_eng: float
    loss_rel: float


def batch_loss_and_grads(
    params: TowerParams, batch: AssembledBatch, omega: float
) -> tuple[BatchStats, FullGrads]:
    """Mean loss over the batch's examples and analytic gradients for every
    parameter, temperatures included. Checked against finite differences in
    the test suite."""
    n_examples = batch.size
    flat_candidates = [b for lists in batch.candidate_buckets for b in lists]
    cache = embed_batch(params, batch.query_buckets + flat_candidates)
    embs = cache.embeddings
    grad_embs = np.zeros_like(embs)

    sigma, tau = params.sigma, params.tau
    sums = np.zeros(3)
    d_log_sigma = 0.0
    d_log_tau = 0.0
    offset = n_examples
    for i in range(n_examples):
        n_cands = len(batch.candidate_buckets[i])
        q = embs[i]
        C = embs[offset : offset + n_cands]
        cosines = C @ q
        le, d_cos_e, d_ls = _softmax_ce(cosines, batch.targets_eng[i], sigma)
        lr_, d_cos_r, d_lt = _softmax_ce(cosines, batch.targets_rel[i], tau)
        d_cos = (omega * d_cos_e + (1.0 - omega) * d_cos_r) / n_examples
        grad_embs[i] += C.T @ d_cos
        grad_embs[offset : offset + n_cands] += np.outer(d_cos, q)
        d_log_sigma += omega * d_ls / n_examples
        d_log_tau += (1.0 - omega) * d_lt / n_examples
        sums += np.array([omega * le + (1.0 - omega) * lr_, le, lr_])
        offset += n_cands

    tower = embed_batch_backward(params, cache, grad_embs)
    stats = BatchStats(*(sums / n_examples))
    grads = FullGrads(
        table=tower.table, projection=tower.projection, log_sigma=d_log_sigma, log_tau=d_log_tau
    )
    return stats, grads


class AdamState:
    """Standard Adam moments for the four parameter groups."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, params: TowerParams):
        self.m_table = np.zeros_like(params.table)
        self.v_table = np.zeros_like(params.table)
        self.m_proj = np.zeros_like(params.projection)
        self.v_proj = np.zeros_like(params.projection)
        self.m_temps = np.zeros(2)
        self.v_temps = np.zeros(2)
        self.t = 0

    def _update(self, m, v, grad):
        m *= self.BETA1
        m += (1 - self.BETA1) * grad
        v *= self.BETA2
        v += (1 - self.BETA2) * np.square(grad)
        m_hat = m / (1 - self.BETA1**self.t)
        v_hat = v / (1 - self.BETA2**self.t)
        return m_hat / (np.sqrt(v_hat) + self.EPS)

    def step(self, params: TowerParams, grads: FullGrads, learning_rate: float) -> None:
        self.t += 1
        params.table -= learning_rate * self._update(self.m_table, self.v_table, grads.table)
        params.projection -= learning_rate * self._update(self.m_proj, self.v_proj, grads.projection)
        temp_grads = np.array([grads.log_sigma, grads.log_tau])
        delta = learning_rate * self._update(self.m_temps, self.v_temps, temp_grads)
        params.log_sigma -= float(delta[0])
        params.log_tau -= float(delta[1])


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss_total: float
    loss_eng: float
    loss_rel: float
    sigma: float
    tau: float

    def to_tsv(self) -> str:
        return f"{self.epoch}\t{self.loss_total:.6f}\t{self.loss_eng:.6f}\t{self.loss_rel:.6f}"


LOSS_HEADER = "epoch\tmean_loss\tmean_loss_eng\tmean_loss_rel"


def save_loss_history(curve: Iterable[EpochStats], path: str | Path) -> None:
    lines = [LOSS_HEADER]
    lines.extend(row.to_tsv() for row in curve)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_loss_history(path: str | Path) -> list[tuple[int, float, float, float]]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if not lines or lines[0] != LOSS_HEADER:
        raise ValueError(f"unrecognized loss history header in {path}")
    rows = []
    for line in lines[1:]:
        epoch, total, eng, rel = line.split("\t")
        rows.append((int(epoch), float(total), float(eng), float(rel)))
    return rows


@dataclass
class TrainResult:
    params: TowerParams
    curve: list[EpochStats]
    num_examples: int
    short_batch_examples: int = 0


def train(dataset: TrainingDataset, encoder: TwoTowerEncoder, config: TrainConfig) -> TrainResult:
    """Run the full loop: sample examples, then per epoch shuffle, batch,
    append in-batch negatives, and take Adam steps on the mixed listwise
    loss. Updates ``encoder.params_`` in place and returns the final
    parameters with the per-epoch loss curve.

    Three independent RNG streams (sampling, shuffling, typo injection) are
    derived from ``config.seed``, so runs are bit-reproducible and the typo
    stream does not perturb the others.
    """
    params = encoder._check_params().copy()
    streams = np.random.SeedSequence(config.seed).spawn(3)
    sample_rng = np.random.default_rng(streams[0])
    shuffle_rng = np.random.default_rng(streams[1])
    typo_rng = np.random.default_rng(streams[2])

    examples = build_examples(dataset.pairs, config, sample_rng)
    if not examples:
        raise ValidationError("no trainable examples: every query lacked a positive label")

    adam = AdamState(params)
    curve: list[EpochStats] = []
    short_total = 0
    for epoch in range(1, config.epochs + 1):
        query_texts = {}
        for ex in examples:
            text = dataset.queries_by_id[ex.query_id].text
            if config.typos is not None:
                text = inject_typos(text, config.typos, typo_rng)
            query_texts[ex.query_id] = text

        order = shuffle_rng.permutation(len(examples))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            chunk = [examples[i] for i in order[start : start + config.batch_size]]
            batch = assemble_batch(params, chunk, dataset.products_by_id, query_texts, config)
            short_total += batch.short_examples
            stats, grads = batch_loss_and_grads(params, batch, config.omega)
            if not math.isfinite(stats.loss_total):
                raise RuntimeError(f"non-finite loss at epoch {epoch}; aborting")
            adam.step(params, grads, config.learning_rate)
            sums += len(chunk) * np.array([stats.loss_total, stats.loss_eng, stats.loss_rel])
        means = sums / len(examples)
        curve.append(EpochStats(epoch, means[0], means[1], means[2], params.sigma, params.tau))

    encoder.params_ = params
    return TrainResult(
        params=params,
        curve=curve,
        num_examples=len(examples),
        short_batch_examples=short_total,
    )


@dataclass
class AnceResult:
    iterations: list[TrainResult]
    mined: list[list[MiningVerdict]]
    pairs: list[LabeledPair]


def ance_loop(
    dataset: TrainingDataset,
    encoder: TwoTowerEncoder,
    config: TrainConfig,
    mining_config: MiningConfig | None = None,
    scorer=None,
    pt_predictions=None,
    relevance_params: RelevanceParams | None = None,
) -> AnceResult:
    """Alternate training with hard-example mining.

    Iteration 1 trains on the given pairs; each further iteration rebuilds
    the retrieval index from the current towers, mines negatives and
    semi-positives for every query that has labeled data, merges them into
    the pair set (engaged rows keep precedence), and trains again from the
    current parameters. ``ance_iterations=1`` is plain training; the mined
    history has one entry per refresh round.
    """
    from .evalkit import build_index

    iterations = [train(dataset, encoder, config)]
    mined_rounds: list[list[MiningVerdict]] = []
    pairs: list[LabeledPair] = list(dataset.pairs)

    for iteration in range(2, config.ance_iterations + 1):
        if scorer is None or pt_predictions is None:
            raise ValueError("mining iterations need a relevance scorer and PT predictions")
        mcfg = mining_config or MiningConfig()
        preds_by_qid = {p.query_id: p for p in pt_predictions}
        index = build_index(list(dataset.products), encoder)
        rng = np.random.default_rng([mcfg.seed, iteration])

        train_qids = list(dict.fromkeys(pair.query_id for pair in pairs))
        verdicts: list[MiningVerdict] = []
        for qid in train_qids:
            if qid not in preds_by_qid:
                raise ValidationError(f"no PT prediction for query {qid!r}; cannot mine")
            negatives, semi_positives = mine_for_query(
                dataset.queries_by_id[qid],
                index,
                scorer,
                preds_by_qid[qid],
                mcfg,
                rng,
                relevance_params,
            )
            verdicts.extend(negatives)
            verdicts.extend(semi_positives)
        mined_rounds.append(verdicts)
        pairs = merge_mined(pairs, verdicts)
        refreshed = TrainingDataset(dataset.queries, dataset.products, pairs)
        iterations.append(train(refreshed, encoder, config))

    return AnceResult(iterations=iterations, mined=mined_rounds, pairs=pairs)
