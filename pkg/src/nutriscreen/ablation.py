"""Ablation and sensitivity harnesses: pose-family removal, architecture
grid, distance metrics, retrieval hyperparameter sweeps, and the
fusion-weight versus neighborhood-density diagnostic."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .graphs import drop_pose_family
from .kb import KnowledgeBase
from .metrics import pearson_r
from .records import ANTHRO_TARGETS, DataError, SubjectRecord
from .training import TrainConfig, evaluate_model, train

POSE_VARIANTS = ("none", "frontal", "lateral", "selfie", "back")

# (layers, heads, dropout) grid; names read layers-heads-dropout.
ARCHITECTURE_GRID = (
    (2, 8, 0.1),
    (2, 2, 0.1),
    (2, 4, 0.1),
    (2, 4, 0.3),
    (3, 4, 0.1),
    (4, 4, 0.1),
)

METRIC_VARIANTS = ("cosine", "euclidean", "mahalanobis_diag")

SWEEP_GRIDS: dict[str, tuple] = {
    "k": (3, 5, 7, 10),
    "tau_class": (0.30, 0.50, 0.70),
    "gamma": (1.00, 1.50, 2.00),
    "tau_reg": (0.05, 0.10, 0.20, 0.50),
}

ABLATION_COLUMNS = ("variant", "acc", "prec", "rec", "f1", "auc", "map", "h", "w", "muac", "hc")
SWEEP_COLUMNS = ("param", "value", "f1", "auc", "recall", "h", "w", "muac", "hc")

_RMSE_KEYS = {"h": "height_cm", "w": "weight_kg", "muac": "muac_cm", "hc": "hc_cm"}


def _summary_row(variant: str, summary: dict) -> dict:
    def mean_of(key: str) -> Optional[float]:
        entry = summary.get(key)
        return entry["mean"] if entry is not None else None

    return {
        "variant": variant,
        "acc": mean_of("accuracy"),
        "prec": mean_of("precision"),
        "rec": mean_of("recall"),
        "f1": mean_of("f1"),
        "auc": mean_of("roc_auc"),
        "map": mean_of("map"),
        "h": mean_of("rmse_height_cm"),
        "w": mean_of("rmse_weight_kg"),
        "muac": mean_of("rmse_muac_cm"),
        "hc": mean_of("rmse_hc_cm"),
    }


def run_ablation(
    records: Sequence[SubjectRecord],
    kb: Optional[KnowledgeBase],
    axis: str,
    config: TrainConfig,
) -> list[dict]:
    """One table row per variant along the requested axis."""
    if axis == "pose":
        rows = []
        for variant in POSE_VARIANTS:
            if variant == "none":
                variant_records = list(records)
            else:
                variant_records = [drop_pose_family(r, variant) for r in records]
            result = train(variant_records, kb, config)
            rows.append(_summary_row(variant, result.summary))
        return rows

    if axis == "architecture":
        rows = []
        for layers, heads, dropout in ARCHITECTURE_GRID:
            name = f"{layers}L-{heads}H-{dropout}D"
            variant_config = replace(config, layers=layers, heads=heads, dropout=dropout)
            result = train(records, kb, variant_config)
            rows.append(_summary_row(name, result.summary))
        return rows

    if axis == "metric":
        if kb is None:
            raise DataError("metric ablation needs a knowledge base")
        rows = []
        for metric in METRIC_VARIANTS:
            variant_kb = KnowledgeBase(kb.entries, metric=metric)
            result = train(records, variant_kb, config)
            rows.append(_summary_row(metric, result.summary))
        return rows

    raise DataError(f"unknown ablation axis {axis!r}; expected pose, architecture or metric")


def run_sweep(
    records: Sequence[SubjectRecord],
    kb: KnowledgeBase,
    axis: str,
    config: TrainConfig,
    values: Optional[Sequence[float]] = None,
) -> list[dict]:
    """Retrieval hyperparameter sensitivity: train once at the defaults, then
    re-evaluate each fold model on its validation fold under each setting.

    Classification columns are null on the regression-temperature axis and
    regression columns are null on the classification-only axes, mirroring
    which outputs each hyperparameter can touch.
    """
    if axis not in SWEEP_GRIDS:
        raise DataError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_GRIDS)}")
    if values is None:
        values = SWEEP_GRIDS[axis]
    if not config.retrieval_enabled:
        raise DataError("sweep requires retrieval to be enabled")

    from .training import stratified_folds

    result = train(records, kb, config)
    folds = stratified_folds(records, config.folds, config.seed)

    classification_on = axis in ("k", "tau_class", "gamma")
    regression_on = axis in ("k", "tau_reg")

    rows = []
    for value in values:
        if axis == "k":
            retrieval = replace(config.retrieval, k=int(value))
        else:
            retrieval = replace(config.retrieval, **{axis: float(value)})
        sweep_config = replace(config, retrieval=retrieval)

        f1s, aucs, recalls = [], [], []
        rmse_acc: dict[str, list[float]] = {t: [] for t in ANTHRO_TARGETS}
        for fold_idx, val_idx in enumerate(folds):
            val_records = [records[i] for i in val_idx]
            report = evaluate_model(result.models[fold_idx], val_records, kb, sweep_config)
            cls = report.get("classification")
            if cls is not None:
                f1s.append(cls["f1"])
                aucs.append(cls["roc_auc"])
                recalls.append(cls["recall"])
            reg = report.get("regression")
            if reg is not None:
                for target in ANTHRO_TARGETS:
                    if target in reg["rmse"]:
                        rmse_acc[target].append(reg["rmse"][target])

        def _mean(values_: list) -> Optional[float]:
            clean = [v for v in values_ if v is not None]
            return float(np.mean(clean)) if clean else None

        rows.append(
            {
                "param": axis,
                "value": value,
                "f1": _mean(f1s) if classification_on else None,
                "auc": _mean(aucs) if classification_on else None,
                "recall": _mean(recalls) if classification_on else None,
                "h": _mean(rmse_acc["height_cm"]) if regression_on else None,
                "w": _mean(rmse_acc["weight_kg"]) if regression_on else None,
                "muac": _mean(rmse_acc["muac_cm"]) if regression_on else None,
                "hc": _mean(rmse_acc["hc_cm"]) if regression_on else None,
            }
        )
    return rows


def alpha_density_diagnostic(
    models: Sequence,
    fold_val_records: Sequence[Sequence[SubjectRecord]],
    kb: KnowledgeBase,
    config: TrainConfig,
) -> dict:
    """Correlation between the gate coefficient and mean neighbor distance,
    pooled over every validation subject of every fold."""
    alphas: list[float] = []
    distances: list[float] = []
    for model, val_records in zip(models, fold_val_records):
        report = evaluate_model(model, val_records, kb, config)
        alphas.extend(report["alphas"])
        distances.extend(report["mean_distances"])
    if len(alphas) < 2:
        raise DataError("not enough fused predictions for the diagnostic")
    r = pearson_r(alphas, distances)
    return {"pearson_r": r, "n_pairs": len(alphas), "alphas": alphas, "mean_distances": distances}


def render_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Aligned text table; None renders as ---."""

    def fmt(value) -> str:
        if value is None:
            return "---"
        if isinstance(value, float):
            return f"{value:.4f}"
        return str(value)

    cells = [[fmt(row.get(c)) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
