"""Single-subject inference: forward pass, neighbor search, fusion, verdict."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .gat import GatForwardOutput, GatModel, model_forward
from .graphs import build_subject_graph
from .kb import KnowledgeBase, NeighborSet, global_query_embedding, search
from .records import ANTHRO_TARGETS, DataError, SubjectRecord, destandardize
from .retrieval import (
    RetrievalConfig,
    fuse_classification,
    fuse_regression,
    make_context,
    retrieval_classify,
    retrieval_regress,
)


@dataclass(frozen=True)
class NeighborAudit:
    subject_id: str
    distance: float
    has_class_label: bool
    has_anthro: bool


@dataclass(frozen=True)
class PredictionResult:
    subject_id: str
    gat_logit: float
    gat_probability: float
    gat_measurements: np.ndarray  # (4,) raw units
    retrieved_score: Optional[float]
    retrieved_measurements: np.ndarray  # (4,) raw units
    retrieved_valid: np.ndarray  # (4,) bool
    alpha_cls: Optional[float]
    alpha_reg: float
    fused_probability: float
    fused_measurements: np.ndarray  # (4,) raw units
    mean_distance: Optional[float]
    threshold: float
    decision: str  # "malnourished" | "healthy"
    neighbors: tuple[NeighborAudit, ...]

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "gat_logit": self.gat_logit,
            "gat_probability": self.gat_probability,
            "gat_measurements": _measurements_dict(self.gat_measurements, np.ones(4, dtype=bool)),
            "retrieved_score": self.retrieved_score,
            "retrieved_measurements": _measurements_dict(
                self.retrieved_measurements, self.retrieved_valid
            ),
            "alpha_cls": self.alpha_cls,
            "alpha_reg": self.alpha_reg,
            "fused_probability": self.fused_probability,
            "fused_measurements": _measurements_dict(
                self.fused_measurements, np.ones(4, dtype=bool)
            ),
            "mean_distance": self.mean_distance,
            "threshold": self.threshold,
            "decision": self.decision,
            "neighbors": [
                {
                    "subject_id": n.subject_id,
                    "distance": n.distance,
                    "has_class_label": n.has_class_label,
                    "has_anthro": n.has_anthro,
                }
                for n in self.neighbors
            ],
        }


_UNITS = {"height_cm": "cm", "weight_kg": "kg", "muac_cm": "cm", "hc_cm": "cm"}


def _measurements_dict(values: np.ndarray, valid: np.ndarray) -> dict:
    return {
        target: {
            "value": float(values[i]) if valid[i] else None,
            "unit": _UNITS[target],
            "valid": bool(valid[i]),
        }
        for i, target in enumerate(ANTHRO_TARGETS)
    }


def destandardize_vector(reg_std: np.ndarray, model: GatModel) -> np.ndarray:
    if model.target_stats is None:
        raise DataError("model carries no target statistics; cannot report raw units")
    return np.asarray(
        [
            destandardize(float(reg_std[i]), target, model.target_stats)
            for i, target in enumerate(ANTHRO_TARGETS)
        ]
    )


@dataclass(frozen=True)
class FusedOutputs:
    """Everything the fusion stage produces for one subject, eval mode."""

    gat: GatForwardOutput
    gat_probability: float
    gat_raw: np.ndarray
    retrieved_score: Optional[float]
    retrieved_raw: np.ndarray
    retrieved_valid: np.ndarray
    alpha_cls: Optional[float]
    fused_probability: float
    fused_raw: np.ndarray
    mean_distance: Optional[float]


def fuse_subject(
    model: GatModel,
    record: SubjectRecord,
    neighbors: Optional[NeighborSet],
    cfg: RetrievalConfig,
) -> FusedOutputs:
    """Forward the subject and blend with retrieval when neighbors are given."""
    graph = build_subject_graph(record)
    output = model_forward(graph, model, train_mode=False)
    gat_prob = float(1.0 / (1.0 + np.exp(-output.cls_logit)))
    gat_raw = destandardize_vector(output.reg, model)

    if neighbors is None or len(neighbors) == 0:
        return FusedOutputs(
            gat=output,
            gat_probability=gat_prob,
            gat_raw=gat_raw,
            retrieved_score=None,
            retrieved_raw=np.zeros(4),
            retrieved_valid=np.zeros(4, dtype=bool),
            alpha_cls=None,
            fused_probability=gat_prob,
            fused_raw=gat_raw,
            mean_distance=None,
        )

    ctx = make_context(output.cls_logit, neighbors)
    try:
        y_ret, _ = retrieval_classify(neighbors, cfg)
    except DataError:
        y_ret = None
    ret_raw, ret_valid = retrieval_regress(neighbors, cfg)

    if y_ret is not None:
        alpha_cls, fused_prob = fuse_classification(
            output.cls_logit, y_ret, ctx, model.fusion, space=model.config.fusion_space
        )
    else:
        alpha_cls, fused_prob = None, gat_prob
    fused_raw = fuse_regression(gat_raw, ret_raw, ret_valid, model.alpha_reg)
    return FusedOutputs(
        gat=output,
        gat_probability=gat_prob,
        gat_raw=gat_raw,
        retrieved_score=y_ret,
        retrieved_raw=ret_raw,
        retrieved_valid=ret_valid,
        alpha_cls=alpha_cls,
        fused_probability=fused_prob,
        fused_raw=fused_raw,
        mean_distance=ctx.mean_distance,
    )


def predict_subject(
    model: GatModel,
    kb: Optional[KnowledgeBase],
    cfg: RetrievalConfig,
    record: SubjectRecord,
    retrieval_enabled: bool = True,
) -> PredictionResult:
    """Full screening verdict for one subject."""
    record.validate()
    neighbors = None
    if retrieval_enabled and kb is not None:
        neighbors = search(kb, global_query_embedding(record), cfg.k)
    fused = fuse_subject(model, record, neighbors, cfg)
    decision = "malnourished" if fused.fused_probability >= model.threshold else "healthy"
    audits = tuple(
        NeighborAudit(
            subject_id=n.entry.subject_id,
            distance=n.distance,
            has_class_label=n.entry.class_label is not None,
            has_anthro=n.entry.anthro is not None,
        )
        for n in (neighbors.neighbors if neighbors is not None else ())
    )
    return PredictionResult(
        subject_id=record.id,
        gat_logit=fused.gat.cls_logit,
        gat_probability=fused.gat_probability,
        gat_measurements=fused.gat_raw,
        retrieved_score=fused.retrieved_score,
        retrieved_measurements=fused.retrieved_raw,
        retrieved_valid=fused.retrieved_valid,
        alpha_cls=fused.alpha_cls,
        alpha_reg=model.alpha_reg,
        fused_probability=fused.fused_probability,
        fused_measurements=fused.fused_raw,
        mean_distance=fused.mean_distance,
        threshold=model.threshold,
        decision=decision,
        neighbors=audits,
    )
