"""Desk-scale workbench for embedding-based product retrieval relevance.

The package walks the full loop on a synthetic catalog with recoverable
ground truth: engagement labeling with feedback-driven revision, a
relevance reward surrogate, two-tower encoder training with a mixed
listwise loss, typo augmentation, guardrailed hard-example mining, and an
exact-retrieval evaluation kit, all orchestrated by the ``ebrlab`` CLI.
"""

from .catalog import (
    EngagementRecord,
    JudgmentRecord,
    Product,
    PTPrediction,
    Query,
    load_catalog,
    load_records,
    save_dataset,
)
from .encoder import TwoTowerEncoder, load_checkpoint, save_checkpoint
from .evalkit import EvalReport, EvalSpec, build_index, run_eval, top_k
from .labeling import (
    LabeledPair,
    LabelingWeights,
    RelevanceParams,
    RevisionParams,
    annotate_dataset,
    engagement_label,
    relevance_label,
    revise_label,
)
from .mining import MiningConfig, MiningVerdict, mine_for_query
from .rrm import (
    OracleScorer,
    RelevanceProbs,
    RelevanceRewardModel,
    SurrogateScorer,
    train_rrm,
)
from .synthgen import GroundTruth, WorldConfig, corrupt_eval_queries, generate_world
from .training import (
    TrainConfig,
    TrainingDataset,
    ance_loop,
    loss_eng,
    loss_rel,
    loss_total,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "EngagementRecord",
    "EvalReport",
    "EvalSpec",
    "GroundTruth",
    "JudgmentRecord",
    "LabeledPair",
    "LabelingWeights",
    "MiningConfig",
    "MiningVerdict",
    "OracleScorer",
    "Product",
    "PTPrediction",
    "Query",
    "RelevanceParams",
    "RelevanceProbs",
    "RelevanceRewardModel",
    "RevisionParams",
    "SurrogateScorer",
    "TrainConfig",
    "TrainingDataset",
    "TwoTowerEncoder",
    "WorldConfig",
    "ance_loop",
    "annotate_dataset",
    "build_index",
    "corrupt_eval_queries",
    "engagement_label",
    "generate_world",
    "load_catalog",
    "load_checkpoint",
    "load_records",
    "loss_eng",
    "loss_rel",
    "loss_total",
    "mine_for_query",
    "relevance_label",
    "revise_label",
    "run_eval",
    "save_checkpoint",
    "save_dataset",
    "top_k",
    "train",
    "train_rrm",
]
