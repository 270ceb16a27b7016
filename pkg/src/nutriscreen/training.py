"""Joint training: weighted BCE + MSE loss, Adam, stratified k-fold
cross-validation, early stopping, Youden threshold selection.

A training run is deterministic given its seed: fold assignment, parameter
initialization, batch order and attention dropout all derive from it, and
re-running with the same inputs reproduces checkpoints byte for byte.
Retrieval during training always queries the fixed external knowledge base,
never the training fold itself.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .gat import (
    BatchItem,
    GatConfig,
    GatModel,
    GradBuffer,
    SubjectRetrieval,
    batch_loss_and_grads,
    clone_params,
    init_model,
    named_params,
    restore_params,
    save_model,
)
from .graphs import build_subject_graph
from .kb import KnowledgeBase, NeighborSet, global_query_embedding, search
from .metrics import ClassificationReport, RegressionReport, classification_metrics, regression_metrics
from .pipeline import fuse_subject
from .records import ANTHRO_TARGETS, DataError, SubjectRecord, TargetStats, compute_target_stats, standardize
from .retrieval import RetrievalConfig


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 50
    learning_rate: float = 1e-3
    folds: int = 4
    seed: int = 42
    patience: int = 10
    dropout: float = 0.1
    heads: int = 8
    layers: int = 2
    head_dim: int = 64
    fusion_hidden: int = 8
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    pos_weight_mode: str = "balanced"  # "balanced" or "off"
    retrieval_enabled: bool = True
    aux_weight: float = 0.5
    fusion_space: str = "prob"
    age_scale: float = 1.0
    loss_variant: str = "bce"  # "focal" is reserved and unimplemented

    def validate(self) -> None:
        if min(self.batch_size, self.max_epochs, self.patience, self.heads, self.layers) < 1:
            raise DataError("train config values must be positive")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.folds < 2:
            raise DataError("folds must be at least 2")
        if self.pos_weight_mode not in ("balanced", "off"):
            raise DataError(f"unknown pos_weight_mode {self.pos_weight_mode!r}")
        if self.loss_variant == "focal":
            raise NotImplementedError("focal loss is a reserved config value, not implemented")
        if self.loss_variant != "bce":
            raise DataError(f"unknown loss_variant {self.loss_variant!r}")
        self.retrieval.validate()

    def gat_config(self) -> GatConfig:
        return GatConfig(
            n_layers=self.layers,
            heads=self.heads,
            head_dim=self.head_dim,
            dropout=self.dropout,
            fusion_hidden=self.fusion_hidden,
            age_scale=self.age_scale,
            fusion_space=self.fusion_space,
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["retrieval"] = asdict(self.retrieval)
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "TrainConfig":
        doc = dict(doc)
        retrieval_doc = doc.pop("retrieval", None)
        known = {f.name for f in fields(TrainConfig)} - {"retrieval"}
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown train config fields: {sorted(unknown)}")
        if retrieval_doc is not None:
            unknown = set(retrieval_doc) - {f.name for f in fields(RetrievalConfig)}
            if unknown:
                raise DataError(f"unknown retrieval config fields: {sorted(unknown)}")
            retrieval = RetrievalConfig(**retrieval_doc)
        else:
            retrieval = RetrievalConfig()
        return TrainConfig(retrieval=retrieval, **doc)


@dataclass
class FoldReport:
    fold: int
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    threshold: float
    youden_j: float
    alpha_reg: float
    classification: ClassificationReport
    regression: RegressionReport
    checkpoint_path: Optional[str]

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "threshold": self.threshold,
            "youden_j": self.youden_j,
            "alpha_reg": self.alpha_reg,
            "classification": self.classification.to_dict(),
            "regression": self.regression.to_dict(),
            "checkpoint_path": self.checkpoint_path,
        }


class Adam:
    """Deterministic Adam operating on the flat gradient vector.

    The moment buffers share the GradBuffer layout, so the moment updates and
    step direction are single vectorized passes; the step then scatters into
    each parameter array through precomputed views.
    """

    def __init__(self, model: GatModel, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._param_views = []
        offset = 0
        for _, arr in named_params(model):
            self._param_views.append((arr, offset, offset + arr.size))
            offset += arr.size
        self.m = np.zeros(offset)
        self.v = np.zeros(offset)
        self._scratch = np.empty(offset)

    def step(self, model: GatModel, grads) -> None:
        g = grads.flat
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        self.m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=self._scratch)
        self.m += self._scratch
        self.v *= self.beta2
        np.multiply(g, g, out=self._scratch)
        self._scratch *= 1.0 - self.beta2
        self.v += self._scratch
        # lr * (m/bc1) / (sqrt(v/bc2) + eps) == a_t * m / (sqrt(v) + eps_t)
        a_t = self.lr * math.sqrt(bc2) / bc1
        eps_t = self.eps * math.sqrt(bc2)
        np.sqrt(self.v, out=self._scratch)
        self._scratch += eps_t
        np.divide(self.m, self._scratch, out=self._scratch)
        self._scratch *= a_t
        for arr, start, end in self._param_views:
            arr -= self._scratch[start:end].reshape(arr.shape)


def joint_loss(
    cls_logits: Sequence[Optional[float]],
    fused_probs: Sequence[Optional[float]],
    reg_std: np.ndarray,
    fused_reg_std: Optional[np.ndarray],
    class_labels: Sequence[Optional[int]],
    reg_targets_std: np.ndarray,
    reg_mask: np.ndarray,
    pos_weight: float = 1.0,
    aux_weight: float = 0.0,
) -> tuple[float, dict[str, float]]:
    """Loss of already-computed outputs: weighted BCE on the fused
    classification score plus MSE over present standardized targets.

    fused_probs / fused_reg_std of None mean the raw head outputs are the
    operating outputs (retrieval disabled); aux terms then contribute zero.
    """
    from .gat import bce_on_probability, weighted_bce_with_logits

    n = len(cls_logits)
    labeled = [i for i in range(n) if class_labels[i] is not None]
    reg_mask = np.asarray(reg_mask, dtype=bool)
    n_reg = int(reg_mask.sum())
    if not labeled and n_reg == 0:
        raise DataError("all labels absent")

    loss_cls = 0.0
    loss_cls_aux = 0.0
    for i in labeled:
        y = float(class_labels[i])
        if fused_probs[i] is not None:
            loss_cls += bce_on_probability(fused_probs[i], y, pos_weight)
            loss_cls_aux += weighted_bce_with_logits(cls_logits[i], y, pos_weight)
        else:
            loss_cls += weighted_bce_with_logits(cls_logits[i], y, pos_weight)
    if labeled:
        loss_cls /= len(labeled)
        loss_cls_aux /= len(labeled)

    loss_reg = 0.0
    loss_reg_aux = 0.0
    if n_reg > 0:
        reg_std = np.asarray(reg_std, dtype=np.float64)
        truth = np.asarray(reg_targets_std, dtype=np.float64)
        operating = reg_std if fused_reg_std is None else np.asarray(fused_reg_std, dtype=np.float64)
        loss_reg = float(np.sum(((operating - truth) ** 2)[reg_mask])) / n_reg
        if fused_reg_std is not None:
            loss_reg_aux = float(np.sum(((reg_std - truth) ** 2)[reg_mask])) / n_reg

    total = loss_cls + loss_reg + aux_weight * (loss_cls_aux + loss_reg_aux)
    return total, {
        "class": loss_cls,
        "reg": loss_reg,
        "class_aux": loss_cls_aux,
        "reg_aux": loss_reg_aux,
        "total": total,
    }


def select_threshold_youden(
    val_probs: Sequence[float], val_labels: Sequence[int]
) -> tuple[float, float]:
    """Threshold maximizing J = TPR - FPR over midpoints of sorted distinct
    probabilities plus {0, 1}; ties resolve toward the lower threshold."""
    probs = np.asarray(list(val_probs), dtype=np.float64)
    labels = np.asarray(list(val_labels), dtype=np.int64)
    if probs.size == 0 or probs.shape != labels.shape:
        raise DataError("probs and labels must be aligned and nonempty")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("threshold selection needs both classes")
    distinct = np.unique(probs)
    midpoints = (distinct[:-1] + distinct[1:]) / 2.0 if distinct.size > 1 else np.empty(0)
    candidates = np.concatenate(([0.0], midpoints, [1.0]))
    best_t = candidates[0]
    best_j = -np.inf
    for t in candidates:
        preds = probs >= t
        tpr = np.sum(preds & (labels == 1)) / n_pos
        fpr = np.sum(preds & (labels == 0)) / n_neg
        j = tpr - fpr
        if j > best_j:
            best_j = j
            best_t = t
    return float(best_t), float(best_j)


def stratified_folds(
    records: Sequence[SubjectRecord], n_folds: int, seed: int
) -> list[np.ndarray]:
    """Deterministic stratified partition: shuffle within class, deal round-robin."""
    if n_folds < 2 or n_folds > len(records):
        raise DataError("fold count must lie in [2, n_records]")
    rng = np.random.default_rng([seed, 0xF01D])
    by_class: dict[int, list[int]] = {}
    for i, record in enumerate(records):
        key = record.class_label if record.class_label is not None else -1
        by_class.setdefault(key, []).append(i)
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    for key in sorted(by_class):
        idx = np.asarray(by_class[key])
        rng.shuffle(idx)
        for pos, record_idx in enumerate(idx):
            folds[pos % n_folds].append(int(record_idx))
    return [np.asarray(sorted(f), dtype=np.int64) for f in folds]


def compute_pos_weight(records: Sequence[SubjectRecord], mode: str) -> float:
    if mode == "off":
        return 1.0
    labels = [r.class_label for r in records if r.class_label is not None]
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("balanced pos_weight needs both classes in the training fold")
    return n_neg / n_pos


def subject_retrieval_outputs(
    neighbors: NeighborSet, cfg: RetrievalConfig, stats: TargetStats
) -> SubjectRetrieval:
    """Fixed retrieval quantities for one subject under one fold's statistics."""
    from .retrieval import retrieval_classify, retrieval_regress

    try:
        y_cls, _ = retrieval_classify(neighbors, cfg)
    except DataError:
        y_cls = None
    raw, valid = retrieval_regress(neighbors, cfg)
    reg_std = np.zeros(len(ANTHRO_TARGETS))
    for t, target in enumerate(ANTHRO_TARGETS):
        if valid[t]:
            reg_std[t] = standardize(float(raw[t]), target, stats)
    return SubjectRetrieval(
        y_cls=y_cls,
        reg_std=reg_std,
        reg_valid=valid,
        mean_distance=float(neighbors.distances().mean()),
    )


def _make_items(
    records: Sequence[SubjectRecord],
    stats: TargetStats,
    neighbor_sets: Optional[Sequence[Optional[NeighborSet]]],
    config: TrainConfig,
) -> list[BatchItem]:
    items = []
    for i, record in enumerate(records):
        targets = np.zeros(len(ANTHRO_TARGETS))
        mask = np.zeros(len(ANTHRO_TARGETS), dtype=bool)
        if record.anthro is not None:
            for t, target in enumerate(ANTHRO_TARGETS):
                value = getattr(record.anthro, target)
                if value is not None:
                    targets[t] = standardize(value, target, stats)
                    mask[t] = True
        retrieval = None
        if neighbor_sets is not None and neighbor_sets[i] is not None:
            retrieval = subject_retrieval_outputs(neighbor_sets[i], config.retrieval, stats)
        graph = build_subject_graph(record)
        features = graph.node_features.astype(np.float64, copy=True)
        if config.age_scale != 1.0:
            features[:, -1] *= config.age_scale
        items.append(
            BatchItem(
                graph=graph,
                class_label=record.class_label,
                reg_targets_std=targets,
                reg_mask=mask,
                retrieval=retrieval,
                features=features,
                adjacency=graph.adjacency_mask(),
            )
        )
    return items


@dataclass
class TrainResult:
    fold_reports: list[FoldReport]
    models: list[GatModel]
    summary: dict

    def to_dict(self) -> dict:
        return {"folds": [r.to_dict() for r in self.fold_reports], "summary": self.summary}


def train(
    records: Sequence[SubjectRecord],
    kb: Optional[KnowledgeBase],
    config: TrainConfig,
    out_dir: Optional[str | Path] = None,
) -> TrainResult:
    """Stratified k-fold training; returns per-fold reports, models, summary."""
    config.validate()
    labels = [r.class_label for r in records if r.class_label is not None]
    if not labels or len(set(labels)) < 2:
        raise DataError("training dataset must contain both classes")
    if config.retrieval_enabled and (kb is None or len(kb) == 0):
        raise DataError("retrieval is enabled but no knowledge base was given")

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    neighbor_sets: Optional[list[NeighborSet]] = None
    if config.retrieval_enabled:
        neighbor_sets = [
            search(kb, global_query_embedding(record), config.retrieval.k) for record in records
        ]

    folds = stratified_folds(records, config.folds, config.seed)
    fold_reports: list[FoldReport] = []
    models: list[GatModel] = []

    for fold_idx, val_idx in enumerate(folds):
        val_mask = np.zeros(len(records), dtype=bool)
        val_mask[val_idx] = True
        train_idx = np.nonzero(~val_mask)[0]

        train_records = [records[i] for i in train_idx]
        val_records = [records[i] for i in val_idx]
        stats = compute_target_stats(train_records)
        pos_weight = compute_pos_weight(train_records, config.pos_weight_mode)

        def ns(idx):
            return [neighbor_sets[i] for i in idx] if neighbor_sets is not None else None

        train_items = _make_items(train_records, stats, ns(train_idx), config)
        val_items = _make_items(val_records, stats, ns(val_idx), config)

        model = init_model(config.gat_config(), seed=config.seed * 1000 + fold_idx)
        model.target_stats = stats
        rng = np.random.default_rng([config.seed, fold_idx])
        optimizer = Adam(model, lr=config.learning_rate)
        grad_buffer = GradBuffer(model)

        train_losses: list[float] = []
        val_losses: list[float] = []
        best_loss = math.inf
        best_epoch = -1
        best_snapshot = clone_params(model)
        stale = 0

        for epoch in range(config.max_epochs):
            order = rng.permutation(len(train_items))
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(order), config.batch_size):
                batch = [train_items[i] for i in order[start : start + config.batch_size]]
                loss, _, grads = batch_loss_and_grads(
                    batch,
                    model,
                    pos_weight=pos_weight,
                    aux_weight=config.aux_weight,
                    train_mode=True,
                    rng=rng,
                    grad_buffer=grad_buffer,
                )
                optimizer.step(model, grads)
                epoch_loss += loss
                n_batches += 1
            train_losses.append(epoch_loss / n_batches)

            val_loss, _, _ = batch_loss_and_grads(
                val_items,
                model,
                pos_weight=pos_weight,
                aux_weight=config.aux_weight,
                compute_grads=False,
            )
            val_losses.append(val_loss)
            if val_loss < best_loss:
                best_loss = val_loss
                best_epoch = epoch
                best_snapshot = clone_params(model)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break

        restore_params(model, best_snapshot)

        val_probs, val_labels, val_reg_pred, val_reg_truth, val_reg_mask, _, _ = _collect_outputs(
            model, val_records, ns(val_idx), config
        )
        threshold, youden_j = select_threshold_youden(val_probs, val_labels)
        model.threshold = threshold

        cls_report = classification_metrics(np.asarray(val_probs), np.asarray(val_labels), threshold)
        reg_report = regression_metrics(val_reg_pred, val_reg_truth, val_reg_mask)

        checkpoint_path = None
        if out_path is not None:
            # relative to the run directory, so reports are location-independent
            checkpoint_path = f"fold{fold_idx}.model.json"
            save_model(model, out_path / checkpoint_path)

        report = FoldReport(
            fold=fold_idx,
            train_losses=train_losses,
            val_losses=val_losses,
            best_epoch=best_epoch,
            threshold=threshold,
            youden_j=youden_j,
            alpha_reg=model.alpha_reg,
            classification=cls_report,
            regression=reg_report,
            checkpoint_path=checkpoint_path,
        )
        fold_reports.append(report)
        models.append(model)
        if out_path is not None:
            (out_path / f"fold{fold_idx}.report.json").write_text(
                json.dumps(report.to_dict()), encoding="utf-8"
            )

    summary = summarize_folds(fold_reports)
    if out_path is not None:
        (out_path / "summary.json").write_text(json.dumps(summary), encoding="utf-8")
    return TrainResult(fold_reports=fold_reports, models=models, summary=summary)


def _collect_outputs(
    model: GatModel,
    records: Sequence[SubjectRecord],
    neighbor_sets: Optional[Sequence[Optional[NeighborSet]]],
    config: TrainConfig,
):
    """Eval-mode fused outputs for a record list (probabilities, regressions,
    fusion coefficients, mean neighbor distances)."""
    probs: list[float] = []
    labels: list[int] = []
    reg_pred = []
    reg_truth = []
    reg_mask = []
    alphas: list[float] = []
    distances: list[float] = []
    for i, record in enumerate(records):
        neighbors = neighbor_sets[i] if neighbor_sets is not None else None
        fused = fuse_subject(model, record, neighbors, config.retrieval)
        if record.class_label is not None:
            probs.append(fused.fused_probability)
            labels.append(record.class_label)
            if fused.alpha_cls is not None:
                alphas.append(fused.alpha_cls)
                distances.append(fused.mean_distance)
        truth = np.zeros(len(ANTHRO_TARGETS))
        mask = np.zeros(len(ANTHRO_TARGETS), dtype=bool)
        if record.anthro is not None:
            for t, target in enumerate(ANTHRO_TARGETS):
                value = getattr(record.anthro, target)
                if value is not None:
                    truth[t] = value
                    mask[t] = True
        reg_pred.append(fused.fused_raw)
        reg_truth.append(truth)
        reg_mask.append(mask)
    return (
        probs,
        labels,
        np.asarray(reg_pred),
        np.asarray(reg_truth),
        np.asarray(reg_mask),
        alphas,
        distances,
    )


def evaluate_model(
    model: GatModel,
    records: Sequence[SubjectRecord],
    kb: Optional[KnowledgeBase],
    config: TrainConfig,
) -> dict:
    """Metrics of one trained model on a record list, at its stored threshold."""
    neighbor_sets = None
    if config.retrieval_enabled and kb is not None:
        neighbor_sets = [
            search(kb, global_query_embedding(record), config.retrieval.k) for record in records
        ]
    probs, labels, reg_pred, reg_truth, reg_mask, alphas, distances = _collect_outputs(
        model, records, neighbor_sets, config
    )
    result: dict = {"threshold": model.threshold}
    if probs:
        result["classification"] = classification_metrics(
            np.asarray(probs), np.asarray(labels), model.threshold
        ).to_dict()
    if reg_mask.size and reg_mask.any():
        # report only the targets this dataset actually carries
        rmse, mae = {}, {}
        for t, target in enumerate(ANTHRO_TARGETS):
            m = reg_mask[:, t]
            if not m.any():
                continue
            err = reg_pred[m, t] - reg_truth[m, t]
            rmse[target] = float(np.sqrt(np.mean(err * err)))
            mae[target] = float(np.mean(np.abs(err)))
        result["regression"] = {"rmse": rmse, "mae": mae}
    result["probs"] = probs
    result["labels"] = labels
    result["alphas"] = alphas
    result["mean_distances"] = distances
    return result


_SUMMARY_METRICS = ("accuracy", "precision", "recall", "f1", "roc_auc", "map")


def summarize_folds(reports: Sequence[FoldReport]) -> dict:
    """Mean and sample standard deviation of each metric across folds."""
    summary: dict = {"n_folds": len(reports)}
    for name in _SUMMARY_METRICS:
        values = [getattr(r.classification, name) for r in reports]
        if any(v is None for v in values):
            summary[name] = None
            continue
        arr = np.asarray(values, dtype=np.float64)
        summary[name] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        }
    for target in ANTHRO_TARGETS:
        arr = np.asarray([r.regression.rmse[target] for r in reports])
        summary[f"rmse_{target}"] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        }
        arr = np.asarray([r.regression.mae[target] for r in reports])
        summary[f"mae_{target}"] = {
            "mean": float(arr.mean()),
            "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
        }
    summary["thresholds"] = [r.threshold for r in reports]
    summary["alpha_reg"] = [r.alpha_reg for r in reports]
    return summary
