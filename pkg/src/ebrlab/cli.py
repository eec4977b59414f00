"""Command-line driver for the retrieval relevance workbench.

Subcommands cover the whole desk-scale loop: generate a synthetic world,
train the relevance reward surrogate, annotate engagement rows with labels,
train the two-tower encoder with its ablation toggles, mine hard examples,
evaluate checkpoints, corrupt query files, run experiment presets, and join
reports. Every command writes a run manifest (config, seeds, input hashes)
beside its outputs, never a timestamp, so reruns with the same seed are
byte-identical.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import TypoConfig
from .catalog import (
    CORRUPTED_QUERIES_FILE,
    ENGAGEMENT_FILE,
    GROUND_TRUTH_FILE,
    JUDGMENTS_FILE,
    PRODUCTS_FILE,
    PT_PREDICTIONS_FILE,
    QUERIES_FILE,
    EngagementRecord,
    JudgmentRecord,
    PTPrediction,
    Query,
    load_catalog,
    load_records,
    save_dataset,
)
from .encoder import TwoTowerEncoder, load_checkpoint, save_checkpoint
from .evalkit import (
    EVAL_KINDS,
    KIND_EM_PRECISION,
    KIND_EM_RECALL,
    KIND_ORDER_RECALL,
    EvalReport,
    EvalSpec,
    build_index,
    read_eval_report,
    run_eval,
    write_eval_report,
    write_per_query_report,
)
from .labeling import LABEL_SCHEMES, LabeledPair, annotate_dataset
from .mining import MiningConfig, MiningVerdict, mine_for_query, summarize
from .rrm import (
    CrossFeaturizer,
    OracleScorer,
    SurrogateScorer,
    load_rrm_params,
    save_rrm_params,
    save_scores,
    suggest_revision_thresholds,
    train_rrm,
)
from .synthgen import (
    GroundTruth,
    VocabConfig,
    WorldConfig,
    corrupt_eval_queries,
    generate_world,
)
from .training import (
    EpochStats,
    TrainConfig,
    TrainingDataset,
    ance_loop,
    save_loss_history,
    train,
)

RRM_PARAMS_FILE = "rrm_params.json"
RRM_SCORES_FILE = "rrm_scores.jsonl"
LABELED_FILE = "labeled_training.jsonl"
CHECKPOINT_FILE = "encoder.ckpt.json"
LOSS_FILE = "loss_history.tsv"
EVAL_REPORT_FILE = "eval_report.tsv"

OMEGA_SWEEP = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)
PRESETS = (
    "omega_sweep",
    "ablation_lr",
    "ablation_ti",
    "ablation_ls_ns",
    "ablation_mol",
    "full_stack",
)
METRIC_COLUMNS = (
    ("em_recall_at_20", KIND_EM_RECALL),
    ("em_precision_at_20", KIND_EM_PRECISION),
    ("order_recall_at_20", KIND_ORDER_RECALL),
)


# ---------------------------------------------------------------------------
# shared plumbing


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(path: Path, command: str, config: dict, inputs: Iterable[Path]) -> None:
    """Provenance record beside the outputs: the effective config (seeds
    included) and a content hash per input file. File names are stored
    without directories so reruns in different directories stay
    byte-identical."""
    rows = sorted(
        ({"name": Path(p).name, "sha256": _sha256_file(p)} for p in inputs),
        key=lambda row: row["name"],
    )
    payload = {"command": command, "config": config, "inputs": rows}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


@dataclass
class WorldData:
    data_dir: Path
    queries: list[Query]
    products: list
    engagement: list[EngagementRecord]
    judgments: list[JudgmentRecord]
    pt_predictions: list[PTPrediction]
    ground_truth: GroundTruth | None

    @property
    def input_files(self) -> list[Path]:
        names = (QUERIES_FILE, PRODUCTS_FILE, ENGAGEMENT_FILE, JUDGMENTS_FILE, PT_PREDICTIONS_FILE)
        files = [self.data_dir / name for name in names if (self.data_dir / name).exists()]
        if (self.data_dir / GROUND_TRUTH_FILE).exists():
            files.append(self.data_dir / GROUND_TRUTH_FILE)
        return files


def load_world(data_dir: str | Path) -> WorldData:
    data_dir = Path(data_dir)
    queries, products = load_catalog(data_dir)
    engagement = load_records(data_dir / ENGAGEMENT_FILE, EngagementRecord)
    judgments = load_records(data_dir / JUDGMENTS_FILE, JudgmentRecord)
    pt_predictions = load_records(data_dir / PT_PREDICTIONS_FILE, PTPrediction)
    gt_path = data_dir / GROUND_TRUTH_FILE
    ground_truth = GroundTruth.load(gt_path) if gt_path.exists() else None
    return WorldData(
        data_dir=data_dir,
        queries=queries,
        products=products,
        engagement=engagement,
        judgments=judgments,
        pt_predictions=pt_predictions,
        ground_truth=ground_truth,
    )


def build_scorer(world: WorldData, kind: str, rrm_params: Path | None, sharpness: float):
    """Resolve the pair scorer: the trained surrogate when requested (or in
    auto mode when its params file exists), otherwise the ground-truth
    oracle. Returns (scorer, resolved kind)."""
    params_path = Path(rrm_params) if rrm_params else world.data_dir / RRM_PARAMS_FILE
    if kind == "auto":
        kind = "rrm" if params_path.exists() else "oracle"
    if kind == "rrm":
        if not params_path.exists():
            raise FileNotFoundError(
                f"scorer 'rrm' needs {params_path}; run the rrm-train command first"
            )
        model = load_rrm_params(params_path)
        featurizer = CrossFeaturizer().fit(world.pt_predictions)
        return SurrogateScorer(model, featurizer), "rrm"
    if world.ground_truth is None:
        raise FileNotFoundError(
            f"scorer 'oracle' needs {world.data_dir / GROUND_TRUTH_FILE}"
        )
    return OracleScorer(world.ground_truth, sharpness=sharpness), "oracle"


def _resolve_seed(args) -> int:
    return args.seed if args.seed is not None else 0


def _renumber_curve(curves: Sequence[Sequence[EpochStats]]) -> list[EpochStats]:
    merged: list[EpochStats] = []
    for curve in curves:
        for stats in curve:
            merged.append(
                EpochStats(
                    epoch=len(merged) + 1,
                    loss_total=stats.loss_total,
                    loss_eng=stats.loss_eng,
                    loss_rel=stats.loss_rel,
                    sigma=stats.sigma,
                    tau=stats.tau,
                )
            )
    return merged


# ---------------------------------------------------------------------------
# reusable pipeline pieces (also exercised directly by the test suite)


@dataclass
class PipelineResult:
    encoder: TwoTowerEncoder
    pairs: list[LabeledPair]
    final_pairs: list[LabeledPair]
    curve: list[EpochStats]
    num_examples: int
    short_batch_examples: int
    mined_rounds: list[list[MiningVerdict]] = field(default_factory=list)


def run_training_pipeline(
    queries,
    products,
    engagement,
    pt_predictions,
    scorer,
    *,
    omega: float = 0.5,
    epochs: int = 5,
    learning_rate: float | None = None,
    dim: int = 32,
    hash_buckets: int = 4096,
    batch_size: int = 72,
    in_batch_k: int = 5,
    seed: int = 0,
    typos: bool = False,
    revision: bool = True,
    scheme: str = "funnel",
    mining: bool = False,
    ance_iterations: int | None = None,
    mining_config: MiningConfig | None = None,
) -> PipelineResult:
    """Annotate engagement rows, then train a fresh encoder end to end.

    The toggles mirror the train command's flags: ``revision`` switches
    label revision, ``typos`` switches training-time query corruption,
    ``scheme`` switches the engagement labeling formula, and ``mining``
    switches the mine-and-retrain loop (two rounds unless
    ``ance_iterations`` says otherwise).
    """
    pairs = annotate_dataset(
        engagement, queries, products, scorer, scheme=scheme, apply_revision=revision
    )
    dataset = TrainingDataset(list(queries), list(products), pairs)
    encoder = TwoTowerEncoder(dim=dim, hash_buckets=hash_buckets, seed=seed).initialize()
    iterations = ance_iterations if ance_iterations is not None else (2 if mining else 1)
    extra = {} if learning_rate is None else {"learning_rate": learning_rate}
    config = TrainConfig(
        omega=omega,
        epochs=epochs,
        seed=seed,
        typos=TypoConfig() if typos else None,
        ance_iterations=iterations,
        batch_size=batch_size,
        in_batch_k=in_batch_k,
        **extra,
    )
    if iterations > 1:
        ance = ance_loop(
            dataset,
            encoder,
            config,
            mining_config or MiningConfig(seed=seed),
            scorer,
            pt_predictions,
        )
        return PipelineResult(
            encoder=encoder,
            pairs=pairs,
            final_pairs=ance.pairs,
            curve=_renumber_curve([r.curve for r in ance.iterations]),
            num_examples=ance.iterations[-1].num_examples,
            short_batch_examples=sum(r.short_batch_examples for r in ance.iterations),
            mined_rounds=ance.mined,
        )
    result = train(dataset, encoder, config)
    return PipelineResult(
        encoder=encoder,
        pairs=pairs,
        final_pairs=pairs,
        curve=result.curve,
        num_examples=result.num_examples,
        short_batch_examples=result.short_batch_examples,
    )


def evaluate_encoder(
    encoder: TwoTowerEncoder,
    products,
    queries,
    ground_truth,
    ks: Sequence[int] = (20,),
) -> EvalReport:
    index = build_index(list(products), encoder)
    specs = [EvalSpec(kind=kind, k=k) for k in ks for kind in EVAL_KINDS]
    return run_eval(index, queries, ground_truth, specs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, parser) -> int:
    vocab = VocabConfig(**args.vocab) if args.vocab else VocabConfig()
    config = WorldConfig(
        seed=_resolve_seed(args),
        num_product_types=args.num_product_types,
        products_per_type=args.products_per_type,
        num_queries=args.num_queries,
        vocab=vocab,
        false_positive_rate=args.false_positive_rate,
        judgment_coverage=args.judgment_coverage,
        misspell_rate=args.misspell_rate,
        accessories_per_type=args.accessories_per_type,
    )
    world = generate_world(config)
    out = Path(args.out)
    world.save(out)
    corrupted = corrupt_eval_queries(world.queries, config.misspell_rate, config.seed)
    save_dataset(corrupted, out / CORRUPTED_QUERIES_FILE)
    inputs = [Path(args.config)] if args.config else []
    write_manifest(out / "manifest_gen.json", "gen", asdict(config), inputs)
    print(
        f"wrote world to {out}: {len(world.queries)} queries, {len(world.products)} products, "
        f"{len(world.engagement)} engagement rows, {len(world.judgments)} judgments"
    )
    return 0


def cmd_rrm_train(args, parser) -> int:
    world = load_world(args.data)
    if not world.judgments:
        raise ValueError("no judgment rows to train on")
    seed = _resolve_seed(args)
    out = Path(args.out) if args.out else world.data_dir
    out.mkdir(parents=True, exist_ok=True)

    order = np.random.default_rng([seed, 104729]).permutation(len(world.judgments))
    n_holdout = int(round(args.holdout * len(world.judgments)))
    holdout_idx = set(order[:n_holdout].tolist())
    train_rows = [rec for i, rec in enumerate(world.judgments) if i not in holdout_idx]
    holdout_rows = [rec for i, rec in enumerate(world.judgments) if i in holdout_idx]
    if not train_rows:
        raise ValueError("holdout fraction leaves no training rows")

    model, featurizer = train_rrm(
        train_rows,
        world.queries,
        world.products,
        world.pt_predictions,
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=seed,
    )
    scorer = SurrogateScorer(model, featurizer)
    queries_by_id = {q.id: q for q in world.queries}
    products_by_id = {p.id: p for p in world.products}

    accuracy = float("nan")
    irrelevant_pe: list[float] = []
    if holdout_rows:
        correct = 0
        for rec in holdout_rows:
            probs = scorer.score(queries_by_id[rec.query_id], products_by_id[rec.product_id])
            if probs.argmax_class == rec.klass:
                correct += 1
            if rec.klass == "Irrelevant":
                irrelevant_pe.append(probs.pE)
        accuracy = correct / len(holdout_rows)

    save_rrm_params(model, out / RRM_PARAMS_FILE)
    seen: set[tuple[str, str]] = set()
    score_rows = []
    for rec in world.engagement:
        key = (rec.query_id, rec.product_id)
        if key in seen:
            continue
        seen.add(key)
        probs = scorer.score(queries_by_id[rec.query_id], products_by_id[rec.product_id])
        score_rows.append((rec.query_id, rec.product_id, probs))
    save_scores(score_rows, out / RRM_SCORES_FILE)

    summary = {
        "training_rows": len(train_rows),
        "holdout_rows": len(holdout_rows),
        "holdout_accuracy": accuracy,
        "final_training_loss": model.loss_curve_[-1],
    }
    if irrelevant_pe:
        p90, p95 = suggest_revision_thresholds(np.array(irrelevant_pe))
        summary["suggested_thresholds"] = {"t_low": p90, "t_high": p95}
    (out / "rrm_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    write_manifest(
        out / "manifest_rrm_train.json",
        "rrm-train",
        {"seed": seed, "holdout": args.holdout, "lr": args.lr, "epochs": args.epochs},
        world.input_files,
    )
    print(f"held-out accuracy: {accuracy:.4f} over {len(holdout_rows)} rows")
    print(f"wrote {out / RRM_PARAMS_FILE} and {out / RRM_SCORES_FILE}")
    return 0


def cmd_annotate(args, parser) -> int:
    world = load_world(args.data)
    scorer, scorer_kind = build_scorer(world, args.scorer, args.rrm_params, args.sharpness)
    rows = annotate_dataset(
        world.engagement,
        world.queries,
        world.products,
        scorer,
        scheme=args.scheme,
        apply_revision=args.label_revision == "on",
    )
    out = Path(args.out) if args.out else world.data_dir / LABELED_FILE
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(rows, out)
    downgraded = sum(1 for r in rows if r.s_revised < r.s_raw)
    inputs = list(world.input_files)
    if scorer_kind == "rrm":
        inputs.append(Path(args.rrm_params) if args.rrm_params else world.data_dir / RRM_PARAMS_FILE)
    write_manifest(
        out.parent / "manifest_annotate.json",
        "annotate",
        {
            "seed": _resolve_seed(args),
            "scorer": scorer_kind,
            "scheme": args.scheme,
            "label_revision": args.label_revision,
            "sharpness": args.sharpness if math.isfinite(args.sharpness) else "inf",
        },
        inputs,
    )
    print(f"annotated {len(rows)} rows ({downgraded} downgraded) -> {out}")
    return 0


def cmd_train(args, parser) -> int:
    if args.mining == "off" and args.ance_iterations and args.ance_iterations > 1:
        parser.error("--mining off conflicts with --ance-iterations > 1")
    if args.mining == "on" and args.ance_iterations is not None and args.ance_iterations < 2:
        parser.error("--mining on needs --ance-iterations >= 2 (mining happens between rounds)")
    world = load_world(args.data)
    scorer, scorer_kind = build_scorer(world, args.scorer, args.rrm_params, args.sharpness)
    seed = _resolve_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = run_training_pipeline(
        world.queries,
        world.products,
        world.engagement,
        world.pt_predictions,
        scorer,
        omega=args.omega,
        epochs=args.epochs,
        learning_rate=args.lr,
        dim=args.dim,
        hash_buckets=args.hash_buckets,
        batch_size=args.batch_size,
        seed=seed,
        typos=args.typos == "on",
        revision=args.label_revision == "on",
        scheme="funnel" if args.new_labels == "on" else "orders_only",
        mining=args.mining == "on",
        ance_iterations=args.ance_iterations,
        mining_config=MiningConfig(negatives_per_query=args.negatives_per_query, seed=seed),
    )

    save_checkpoint(result.encoder, out / CHECKPOINT_FILE)
    save_loss_history(result.curve, out / LOSS_FILE)
    save_dataset(result.final_pairs, out / LABELED_FILE)
    for round_index, verdicts in enumerate(result.mined_rounds, start=1):
        save_dataset(verdicts, out / f"mined_iteration_{round_index}.jsonl")
    if result.mined_rounds:
        lines = ["query_id\tnegatives\tsemi_positives"]
        for qid, negs, semis in summarize(v for vs in result.mined_rounds for v in vs):
            lines.append(f"{qid}\t{negs}\t{semis}")
        (out / "mining_summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    params = result.encoder.params_
    flags = {
        "omega": args.omega,
        "typos": args.typos,
        "label_revision": args.label_revision,
        "new_labels": args.new_labels,
        "mining": args.mining,
        "seed": seed,
        "epochs": args.epochs,
        "learning_rate": args.lr if args.lr is not None else TrainConfig().learning_rate,
        "dim": args.dim,
        "hash_buckets": args.hash_buckets,
        "batch_size": args.batch_size,
        "ance_iterations": args.ance_iterations,
        "scorer": scorer_kind,
    }
    summary = {
        "num_examples": result.num_examples,
        "short_batch_examples": result.short_batch_examples,
        "labeled_rows": len(result.pairs),
        "downgraded_rows": sum(1 for r in result.pairs if r.s_revised < r.s_raw),
        "final_loss": result.curve[-1].loss_total,
        "final_sigma": params.sigma,
        "final_tau": params.tau,
        "sigma_frozen": args.omega == 0.0,
        "tau_frozen": args.omega == 1.0,
        "mined": [
            {
                "round": i,
                "negatives": sum(1 for v in vs if v.verdict == "negative"),
                "semi_positives": sum(1 for v in vs if v.verdict == "semi_positive"),
            }
            for i, vs in enumerate(result.mined_rounds, start=1)
        ],
        "flags": flags,
    }
    (out / "train_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out / "train_config.json").write_text(
        json.dumps(flags, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    inputs = list(world.input_files)
    if scorer_kind == "rrm":
        inputs.append(Path(args.rrm_params) if args.rrm_params else world.data_dir / RRM_PARAMS_FILE)
    write_manifest(out / "manifest_train.json", "train", flags, inputs)
    frozen_note = " (tau frozen)" if args.omega == 1.0 else (" (sigma frozen)" if args.omega == 0.0 else "")
    print(
        f"trained on {result.num_examples} examples; final loss {result.curve[-1].loss_total:.4f}; "
        f"sigma {params.sigma:.4f}, tau {params.tau:.4f}{frozen_note}"
    )
    print(f"checkpoint -> {out / CHECKPOINT_FILE}")
    return 0


def cmd_mine(args, parser) -> int:
    world = load_world(args.data)
    encoder = load_checkpoint(args.checkpoint)
    scorer, scorer_kind = build_scorer(world, args.scorer, args.rrm_params, args.sharpness)
    seed = _resolve_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = MiningConfig(
        top_k=args.top_k,
        negatives_per_query=args.negatives_per_query,
        seed=seed,
    )
    preds_by_qid = {p.query_id: p for p in world.pt_predictions}
    index = build_index(world.products, encoder)
    rng = np.random.default_rng([seed, args.iteration])
    verdicts: list[MiningVerdict] = []
    skipped = 0
    for query in world.queries:
        pred = preds_by_qid.get(query.id)
        if pred is None:
            skipped += 1
            continue
        negatives, semi_positives = mine_for_query(query, index, scorer, pred, config, rng)
        verdicts.extend(negatives)
        verdicts.extend(semi_positives)

    mined_path = out / f"mined_iteration_{args.iteration}.jsonl"
    save_dataset(verdicts, mined_path)
    lines = ["query_id\tnegatives\tsemi_positives"]
    for qid, negs, semis in summarize(verdicts):
        lines.append(f"{qid}\t{negs}\t{semis}")
    (out / "mining_summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    write_manifest(
        out / "manifest_mine.json",
        "mine",
        {
            "seed": seed,
            "iteration": args.iteration,
            "top_k": args.top_k,
            "negatives_per_query": args.negatives_per_query,
            "scorer": scorer_kind,
        },
        list(world.input_files) + [Path(args.checkpoint)],
    )
    negatives = sum(1 for v in verdicts if v.verdict == "negative")
    semis = len(verdicts) - negatives
    print(f"mined {negatives} negatives and {semis} semi-positives over "
          f"{len(world.queries) - skipped} queries -> {mined_path}")
    return 0


def _parse_k_list(raw: str, parser) -> list[int]:
    try:
        ks = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        parser.error(f"--k expects a comma-separated integer list, got {raw!r}")
    if not ks or any(k < 1 for k in ks):
        parser.error(f"--k values must be >= 1, got {raw!r}")
    return ks


def cmd_eval(args, parser) -> int:
    data_dir = Path(args.data)
    _, products = load_catalog(data_dir)
    gt_path = data_dir / GROUND_TRUTH_FILE
    if not gt_path.exists():
        raise FileNotFoundError(f"evaluation needs {gt_path}")
    ground_truth = GroundTruth.load(gt_path)
    queries_path = Path(args.queries) if args.queries else data_dir / QUERIES_FILE
    queries = load_records(queries_path, Query)
    encoder = load_checkpoint(args.checkpoint)
    ks = _parse_k_list(args.k, parser)

    report = evaluate_encoder(encoder, products, queries, ground_truth, ks=ks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / args.report_name
    write_eval_report(report, report_path)
    if args.per_query:
        write_per_query_report(report, report_path.with_name(report_path.stem + "_per_query.tsv"))
    write_manifest(
        out / "manifest_eval.json",
        "eval",
        {"seed": _resolve_seed(args), "k": ks, "queries_file": queries_path.name},
        [queries_path, data_dir / PRODUCTS_FILE, gt_path, Path(args.checkpoint)],
    )
    for row in report.rows:
        print(f"{row.kind}@{row.k}: {row.macro_metric:.4f} "
              f"({row.query_count} queries, {row.excluded_count} excluded)")
    return 0


def cmd_augment(args, parser) -> int:
    queries = load_records(args.queries, Query)
    seed = _resolve_seed(args)
    corrupted = corrupt_eval_queries(queries, args.rate, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(corrupted, out)

    diff_path = Path(args.diff) if args.diff else out.with_name(out.stem + "_diff.tsv")
    lines = ["query_id\toriginal\tcorrupted\tchanged"]
    changed = 0
    for before, after in zip(queries, corrupted):
        flag = int(before.text != after.text)
        changed += flag
        lines.append(f"{before.id}\t{before.text}\t{after.text}\t{flag}")
    diff_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    write_manifest(
        out.parent / "manifest_augment.json",
        "augment",
        {"seed": seed, "rate": args.rate},
        [Path(args.queries)],
    )
    print(f"corrupted {changed}/{len(queries)} queries -> {out} (diff: {diff_path})")
    return 0


# ---------------------------------------------------------------------------
# experiment presets


def _metrics_from_report(report: EvalReport, k: int = 20) -> dict[str, float]:
    return {name: report.value(kind, k) for name, kind in METRIC_COLUMNS}


def _run_variant(world: WorldData, scorer, args, *, corrupted=None, **toggles) -> dict[str, float]:
    """One pipeline run returning the metric row for a preset table."""
    result = run_training_pipeline(
        world.queries,
        world.products,
        world.engagement,
        world.pt_predictions,
        scorer,
        epochs=args.epochs,
        learning_rate=args.lr,
        dim=args.dim,
        seed=_resolve_seed(args),
        **toggles,
    )
    report = evaluate_encoder(result.encoder, world.products, world.queries, world.ground_truth)
    metrics = _metrics_from_report(report)
    if corrupted is not None:
        corrupted_report = evaluate_encoder(
            result.encoder, world.products, corrupted, world.ground_truth
        )
        metrics["em_recall_at_20_corrupted"] = corrupted_report.value(KIND_EM_RECALL, 20)
    return metrics


def _write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        cells = [cell if isinstance(cell, str) else f"{cell:.6f}" for cell in row]
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def render_line_svg(points: Sequence[tuple[float, float]], xlabel: str, ylabel: str, path: Path) -> None:
    """Single-file line chart, no external assets."""
    width, height = 640, 420
    ml, mr, mt, mb = 80, 24, 24, 56
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    pad = (y_hi - y_lo) * 0.08 or 0.01
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(y: float) -> float:
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
    ]
    for i in range(5):
        y_val = y_lo + (y_hi - y_lo) * i / 4
        y_px = sy(y_val)
        parts.append(f'<line x1="{ml - 4}" y1="{y_px:.1f}" x2="{ml}" y2="{y_px:.1f}" stroke="black"/>')
        parts.append(
            f'<text x="{ml - 8}" y="{y_px + 4:.1f}" text-anchor="end">{y_val:.3f}</text>'
        )
    for x in xs:
        x_px = sx(x)
        parts.append(
            f'<line x1="{x_px:.1f}" y1="{height - mb}" x2="{x_px:.1f}" y2="{height - mb + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x_px:.1f}" y="{height - mb + 18}" text-anchor="middle">{x:g}</text>'
        )
    polyline = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in points)
    parts.append(f'<polyline points="{polyline}" fill="none" stroke="#1f6fb4" stroke-width="2"/>')
    for x, y in points:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="#1f6fb4"/>')
    parts.append(
        f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>'
    )
    parts.append(
        f'<text x="18" y="{(mt + height - mb) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(mt + height - mb) / 2:.1f})">{ylabel}</text>'
    )
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")


def _ablation_rows(control: dict[str, float], treatment: dict[str, float], columns: Sequence[str]):
    rows = [
        ["control"] + [control[c] for c in columns],
        ["treatment"] + [treatment[c] for c in columns],
        ["delta"] + [treatment[c] - control[c] for c in columns],
    ]
    return rows


def cmd_experiment(args, parser) -> int:
    world = load_world(args.data)
    if world.ground_truth is None:
        raise FileNotFoundError(f"experiments need {world.data_dir / GROUND_TRUTH_FILE}")
    scorer, scorer_kind = build_scorer(world, args.scorer, args.rrm_params, args.sharpness)
    seed = _resolve_seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / f"{args.preset}.tsv"
    metric_names = [name for name, _ in METRIC_COLUMNS]

    plot_points: list[tuple[float, float]] | None = None
    if args.preset == "omega_sweep":
        # The sweep isolates the loss-mixing weight. Label revision is held
        # off so the engagement channel keeps its raw funnel signal instead
        # of being folded into the same scorer that feeds the relevance
        # channel; the revision toggle has its own ablation preset.
        header = ["omega"] + metric_names
        rows = []
        for omega in OMEGA_SWEEP:
            metrics = _run_variant(world, scorer, args, omega=omega, revision=False)
            rows.append([f"{omega:g}"] + [metrics[name] for name in metric_names])
        _write_table(table_path, header, rows)
        plot_points = [(float(row[0]), row[1]) for row in rows]
    elif args.preset == "ablation_lr":
        control = _run_variant(world, scorer, args, revision=False)
        treatment = _run_variant(world, scorer, args, revision=True)
        _write_table(table_path, ["run"] + metric_names,
                     _ablation_rows(control, treatment, metric_names))
    elif args.preset == "ablation_ti":
        corrupted = corrupt_eval_queries(world.queries, 1.0, seed)
        columns = ["em_recall_at_20", "em_recall_at_20_corrupted"]
        control = _run_variant(world, scorer, args, typos=False, corrupted=corrupted)
        treatment = _run_variant(world, scorer, args, typos=True, corrupted=corrupted)
        _write_table(table_path, ["run"] + columns, _ablation_rows(control, treatment, columns))
    elif args.preset == "ablation_ls_ns":
        control = _run_variant(world, scorer, args, scheme="orders_only", mining=False)
        treatment = _run_variant(world, scorer, args, scheme="funnel", mining=True)
        _write_table(table_path, ["run"] + metric_names,
                     _ablation_rows(control, treatment, metric_names))
    elif args.preset == "ablation_mol":
        control = _run_variant(world, scorer, args, omega=1.0)
        treatment = _run_variant(world, scorer, args, omega=0.5)
        _write_table(table_path, ["run"] + metric_names,
                     _ablation_rows(control, treatment, metric_names))
    else:  # full_stack
        corrupted = corrupt_eval_queries(world.queries, 1.0, seed)
        columns = metric_names + ["em_recall_at_20_corrupted"]
        control = _run_variant(
            world, scorer, args,
            omega=1.0, typos=False, revision=False, scheme="orders_only", mining=False,
            corrupted=corrupted,
        )
        treatment = _run_variant(
            world, scorer, args,
            omega=0.5, typos=True, revision=True, scheme="funnel", mining=True,
            corrupted=corrupted,
        )
        _write_table(table_path, ["run"] + columns, _ablation_rows(control, treatment, columns))

    if args.plot and plot_points:
        render_line_svg(plot_points, "omega", "em_recall_at_20", out / f"{args.preset}.svg")
    write_manifest(
        out / f"manifest_experiment_{args.preset}.json",
        "experiment",
        {
            "preset": args.preset,
            "seed": seed,
            "epochs": args.epochs,
            "learning_rate": args.lr,
            "dim": args.dim,
            "scorer": scorer_kind,
        },
        world.input_files,
    )
    print(table_path.read_text(encoding="utf-8"), end="")
    print(f"wrote {table_path}")
    return 0


def cmd_report(args, parser) -> int:
    if args.labels and len(args.labels) != len(args.inputs):
        parser.error("--labels must match --inputs in count")
    labels = args.labels or [Path(p).stem for p in args.inputs]
    reports = [read_eval_report(p) for p in args.inputs]

    keys: list[tuple[str, int]] = []
    for rows in reports:
        for row in rows:
            if (row.kind, row.k) not in keys:
                keys.append((row.kind, row.k))
    by_key = [
        {(row.kind, row.k): row.macro_metric for row in rows}
        for rows in reports
    ]
    header = ["kind", "k"] + labels + (["delta"] if len(reports) == 2 else [])
    lines = ["\t".join(header)]
    for kind, k in keys:
        cells = [kind, str(k)]
        values = []
        for mapping in by_key:
            value = mapping.get((kind, k))
            values.append(value)
            cells.append("" if value is None else f"{value:.6f}")
        if len(reports) == 2 and None not in values:
            cells.append(f"{values[1] - values[0]:.6f}")
        lines.append("\t".join(cells))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(
        out.parent / "manifest_report.json",
        "report",
        {"labels": labels},
        [Path(p) for p in args.inputs],
    )
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _add_scorer_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--scorer", choices=("auto", "rrm", "oracle"), default="auto",
                     help="pair scorer: trained surrogate, ground-truth oracle, or auto "
                          "(surrogate when its params file exists)")
    sub.add_argument("--rrm-params", default=None,
                     help="surrogate params file (default: <data>/rrm_params.json)")
    sub.add_argument("--sharpness", type=float, default=math.inf,
                     help="oracle scorer concentration; inf is one-hot")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="PRNG seed (default 0)")
    shared.add_argument("--threads", type=int, default=1,
                        help="thread budget hint recorded in the manifest; computation "
                             "at this scale is single threaded")
    shared.add_argument("--config", default=None,
                        help="JSON file of defaults for this command's flags")

    parser = argparse.ArgumentParser(
        prog="ebrlab",
        description="Desk-scale retrieval relevance workbench.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    gen = subparsers.add_parser("gen", parents=[shared], help="generate a synthetic world")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--num-product-types", type=int, default=WorldConfig.num_product_types)
    gen.add_argument("--products-per-type", type=int, default=WorldConfig.products_per_type)
    gen.add_argument("--num-queries", type=int, default=WorldConfig.num_queries)
    gen.add_argument("--false-positive-rate", type=float, default=WorldConfig.false_positive_rate)
    gen.add_argument("--judgment-coverage", type=float, default=WorldConfig.judgment_coverage)
    gen.add_argument("--misspell-rate", type=float, default=WorldConfig.misspell_rate)
    gen.add_argument("--accessories-per-type", type=int, default=WorldConfig.accessories_per_type)
    gen.set_defaults(func=cmd_gen, vocab=None)
    registry["gen"] = gen

    rrm_train = subparsers.add_parser("rrm-train", parents=[shared],
                                      help="train the relevance reward surrogate on judgments")
    rrm_train.add_argument("--data", required=True, help="world directory")
    rrm_train.add_argument("--out", default=None, help="output directory (default: the data dir)")
    rrm_train.add_argument("--holdout", type=float, default=0.2,
                           help="held-out fraction for the accuracy report")
    rrm_train.add_argument("--lr", type=float, default=0.05)
    rrm_train.add_argument("--epochs", type=int, default=800)
    rrm_train.set_defaults(func=cmd_rrm_train)
    registry["rrm-train"] = rrm_train

    annotate = subparsers.add_parser("annotate", parents=[shared],
                                     help="label engagement rows for training")
    annotate.add_argument("--data", required=True)
    annotate.add_argument("--out", default=None,
                          help="labeled rows file (default: <data>/labeled_training.jsonl)")
    annotate.add_argument("--scheme", choices=LABEL_SCHEMES, default="funnel")
    annotate.add_argument("--label-revision", choices=("on", "off"), default="on")
    _add_scorer_flags(annotate)
    annotate.set_defaults(func=cmd_annotate)
    registry["annotate"] = annotate

    train_cmd = subparsers.add_parser("train", parents=[shared],
                                      help="train the two-tower encoder end to end")
    train_cmd.add_argument("--data", required=True)
    train_cmd.add_argument("--out", required=True)
    train_cmd.add_argument("--omega", type=float, default=0.5,
                           help="engagement/relevance loss mix in [0, 1]")
    train_cmd.add_argument("--typos", choices=("on", "off"), default="off",
                           help="training-time query typo augmentation")
    train_cmd.add_argument("--label-revision", choices=("on", "off"), default="on")
    train_cmd.add_argument("--new-labels", choices=("on", "off"), default="on",
                           help="on: weighted engagement funnel; off: raw order counts")
    train_cmd.add_argument("--mining", choices=("on", "off"), default="off",
                           help="mine hard examples and retrain")
    train_cmd.add_argument("--epochs", type=int, default=5)
    train_cmd.add_argument("--lr", type=float, default=None,
                           help=f"Adam learning rate (default {TrainConfig().learning_rate})")
    train_cmd.add_argument("--dim", type=int, default=32)
    train_cmd.add_argument("--hash-buckets", type=int, default=4096)
    train_cmd.add_argument("--batch-size", type=int, default=72)
    train_cmd.add_argument("--ance-iterations", type=int, default=None,
                           help="training rounds; rounds after the first mine first "
                                "(needs --mining on)")
    train_cmd.add_argument("--negatives-per-query", type=int, default=10)
    _add_scorer_flags(train_cmd)
    train_cmd.set_defaults(func=cmd_train)
    registry["train"] = train_cmd

    mine = subparsers.add_parser("mine", parents=[shared],
                                 help="mine hard negatives and semi-positives from a checkpoint")
    mine.add_argument("--data", required=True)
    mine.add_argument("--checkpoint", required=True)
    mine.add_argument("--out", required=True)
    mine.add_argument("--iteration", type=int, default=1, help="round number used in file names")
    mine.add_argument("--top-k", type=int, default=200)
    mine.add_argument("--negatives-per-query", type=int, default=10)
    _add_scorer_flags(mine)
    mine.set_defaults(func=cmd_mine)
    registry["mine"] = mine

    eval_cmd = subparsers.add_parser("eval", parents=[shared],
                                     help="evaluate a checkpoint against ground truth")
    eval_cmd.add_argument("--data", required=True)
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--out", required=True)
    eval_cmd.add_argument("--k", default="20", help="comma-separated cutoff list")
    eval_cmd.add_argument("--queries", default=None,
                          help="alternate query file (e.g. corrupted copies)")
    eval_cmd.add_argument("--per-query", action="store_true",
                          help="also write per-query metric rows")
    eval_cmd.add_argument("--report-name", default=EVAL_REPORT_FILE)
    eval_cmd.set_defaults(func=cmd_eval)
    registry["eval"] = eval_cmd

    augment = subparsers.add_parser("augment", parents=[shared],
                                    help="corrupt a query file with keyboard-style typos")
    augment.add_argument("--queries", required=True)
    augment.add_argument("--out", required=True)
    augment.add_argument("--rate", type=float, default=1.0)
    augment.add_argument("--diff", default=None, help="diff TSV path")
    augment.set_defaults(func=cmd_augment)
    registry["augment"] = augment

    experiment = subparsers.add_parser("experiment", parents=[shared],
                                       help="run a named study preset")
    experiment.add_argument("--preset", choices=PRESETS, required=True)
    experiment.add_argument("--data", required=True)
    experiment.add_argument("--out", required=True)
    experiment.add_argument("--epochs", type=int, default=5)
    experiment.add_argument("--lr", type=float, default=None)
    experiment.add_argument("--dim", type=int, default=32)
    experiment.add_argument("--plot", action="store_true", help="also write a single-file SVG chart")
    _add_scorer_flags(experiment)
    experiment.set_defaults(func=cmd_experiment)
    registry["experiment"] = experiment

    report = subparsers.add_parser("report", parents=[shared],
                                   help="join eval reports into a comparison table")
    report.add_argument("--inputs", nargs="+", required=True)
    report.add_argument("--labels", nargs="*", default=None)
    report.add_argument("--out", required=True)
    report.set_defaults(func=cmd_report)
    registry["report"] = report

    return parser, registry


def _apply_config_file(parser, registry, argv, args):
    """Merge a --config JSON file as flag defaults and reparse. Flags given
    on the command line keep precedence."""
    config_path = Path(args.config)
    if not config_path.exists():
        registry[args.command].error(f"config file not found: {config_path}")
    try:
        overrides = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        registry[args.command].error(f"config file {config_path} is not valid JSON: {exc}")
    if not isinstance(overrides, dict):
        registry[args.command].error(f"config file {config_path} must hold a JSON object")
    sub = registry[args.command]
    known = {action.dest for action in sub._actions}
    known.add("vocab")
    for key in overrides:
        if key not in known:
            sub.error(f"unknown config key {key!r} for command {args.command}")
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        args = _apply_config_file(parser, registry, argv, args)
    try:
        return args.func(args, registry[args.command])
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001 -- single boundary for exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
