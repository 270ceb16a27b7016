"""Retrieval-augmented multi-pose graph attention screening.

Pipeline: per-pose embeddings become nodes of a fully connected subject
graph; a two-layer multi-head attention network pools them into a subject
embedding with classification and regression heads; an exactly-searched
knowledge base supplies class-boosted, distance-weighted neighbor
predictions; a learned gate fuses the two routes.
"""

from .estimator import MalnutritionScreener
from .gat import GatConfig, GatModel, init_model, load_model, model_forward, save_model
from .graphs import PoseGraph, build_subject_graph, drop_pose_family
from .kb import KnowledgeBase, build_kb, global_query_embedding, load_kb, save_kb, search
from .metrics import (
    calibration_metrics,
    classification_metrics,
    decision_curve,
    effect_size,
    fold_ci,
    pearson_r,
    regression_metrics,
)
from .pipeline import PredictionResult, predict_subject
from .records import (
    AnthroLabels,
    DataError,
    PoseKind,
    SubjectRecord,
    SyntheticConfig,
    TargetStats,
    compute_target_stats,
    destandardize,
    generate_synthetic_cohort,
    load_dataset,
    save_dataset,
    standardize,
)
from .retrieval import (
    RetrievalConfig,
    fuse_classification,
    fuse_regression,
    make_context,
    retrieval_classify,
    retrieval_regress,
)
from .training import TrainConfig, joint_loss, select_threshold_youden, train

__version__ = "0.1.0"

__all__ = [
    "AnthroLabels",
    "DataError",
    "GatConfig",
    "GatModel",
    "KnowledgeBase",
    "MalnutritionScreener",
    "PoseGraph",
    "PoseKind",
    "PredictionResult",
    "RetrievalConfig",
    "SubjectRecord",
    "SyntheticConfig",
    "TargetStats",
    "TrainConfig",
    "build_kb",
    "build_subject_graph",
    "calibration_metrics",
    "classification_metrics",
    "compute_target_stats",
    "decision_curve",
    "destandardize",
    "drop_pose_family",
    "effect_size",
    "fold_ci",
    "fuse_classification",
    "fuse_regression",
    "generate_synthetic_cohort",
    "global_query_embedding",
    "init_model",
    "joint_loss",
    "load_dataset",
    "load_kb",
    "load_model",
    "make_context",
    "model_forward",
    "pearson_r",
    "predict_subject",
    "regression_metrics",
    "retrieval_classify",
    "retrieval_regress",
    "save_dataset",
    "save_kb",
    "save_model",
    "search",
    "select_threshold_youden",
    "standardize",
    "train",
]
