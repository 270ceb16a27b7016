"""Evaluation metrics: classification, regression, calibration, decision
curves, fold confidence intervals, effect sizes, correlation.

Everything here is a pure function of arrays. AUC uses the rank statistic
with ties contributing one half; average precision follows the
step-interpolated precision-recall sum over distinct score thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .records import ANTHRO_TARGETS, DataError

# Two-sided 95% Student-t critical values by degrees of freedom, 4 decimals.
_T_TABLE_95 = {
    1: 12.7062, 2: 4.3027, 3: 3.1824, 4: 2.7764, 5: 2.5706,
    6: 2.4469, 7: 2.3646, 8: 2.3060, 9: 2.2622, 10: 2.2281,
    11: 2.2010, 12: 2.1788, 13: 2.1604, 14: 2.1448, 15: 2.1314,
    16: 2.1199, 17: 2.1098, 18: 2.1009, 19: 2.0930, 20: 2.0860,
    21: 2.0796, 22: 2.0739, 23: 2.0687, 24: 2.0639, 25: 2.0595,
    26: 2.0555, 27: 2.0518, 28: 2.0484, 29: 2.0452, 30: 2.0423,
}


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    precision: float  # 0.0 when undefined; see precision_defined
    recall: float
    f1: float
    roc_auc: Optional[float]  # None when only one class is present
    map: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int
    precision_defined: bool

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "roc_auc": self.roc_auc,
            "map": self.map,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "precision_defined": self.precision_defined,
        }


@dataclass(frozen=True)
class RegressionReport:
    rmse: dict[str, float]
    mae: dict[str, float]

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae}


def _check_probs_labels(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape != labels.shape or probs.ndim != 1:
        raise DataError("probs and labels must be aligned 1-d arrays")
    if probs.size == 0:
        raise DataError("empty input")
    if np.any(probs < 0) or np.any(probs > 1):
        raise DataError("probabilities must lie in [0, 1]")
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError("labels must be 0 or 1")
    return probs, labels.astype(np.int64)


def roc_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney rank form; tied scores contribute one half per pair."""
    probs, labels = _check_probs_labels(probs, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes")
    order = np.argsort(probs, kind="stable")
    ranks = np.empty(probs.size, dtype=np.float64)
    sorted_probs = probs[order]
    i = 0
    while i < probs.size:
        j = i
        while j + 1 < probs.size and sorted_probs[j + 1] == sorted_probs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(probs: np.ndarray, labels: np.ndarray) -> float:
    """AP of the positive class: sum of (recall step) * precision at each
    distinct threshold, descending."""
    probs, labels = _check_probs_labels(probs, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DataError("average precision needs both classes")
    thresholds = np.unique(probs)[::-1]
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        preds = probs >= t
        tp = int(np.sum(preds & (labels == 1)))
        fp = int(np.sum(preds & (labels == 0)))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def classification_metrics(
    probs: np.ndarray, labels: np.ndarray, threshold: float
) -> ClassificationReport:
    probs, labels = _check_probs_labels(probs, labels)
    preds = probs >= threshold
    tp = int(np.sum(preds & (labels == 1)))
    fp = int(np.sum(preds & (labels == 0)))
    fn = int(np.sum(~preds & (labels == 1)))
    tn = int(np.sum(~preds & (labels == 0)))
    n = labels.size
    accuracy = (tp + tn) / n
    precision_defined = (tp + fp) > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision_defined and (precision + recall) > 0
        else 0.0
    )
    both_classes = 0 < labels.sum() < n
    auc = roc_auc(probs, labels) if both_classes else None
    ap = average_precision(probs, labels) if both_classes else None
    return ClassificationReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        roc_auc=auc,
        map=ap,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        precision_defined=precision_defined,
    )


def regression_metrics(
    preds: np.ndarray, truths: np.ndarray, masks: np.ndarray
) -> RegressionReport:
    """Per-target RMSE and MAE over unmasked pairs, raw units."""
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if preds.shape != truths.shape or preds.shape != masks.shape:
        raise DataError("preds, truths and masks must be aligned")
    if preds.ndim != 2 or preds.shape[1] != len(ANTHRO_TARGETS):
        raise DataError(f"expected (n, {len(ANTHRO_TARGETS)}) arrays")
    rmse: dict[str, float] = {}
    mae: dict[str, float] = {}
    for t, target in enumerate(ANTHRO_TARGETS):
        mask = masks[:, t]
        if not mask.any():
            raise DataError(f"no unmasked pairs for target {target}")
        err = preds[mask, t] - truths[mask, t]
        rmse[target] = float(np.sqrt(np.mean(err * err)))
        mae[target] = float(np.mean(np.abs(err)))
    return RegressionReport(rmse=rmse, mae=mae)


def calibration_metrics(probs: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> dict:
    """ECE, MCE and Brier over equal-width confidence bins on [0, 1]."""
    probs, labels = _check_probs_labels(probs, labels)
    if n_bins < 1:
        raise DataError("n_bins must be at least 1")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    # left-closed bins, except the last which also includes 1.0
    idx = np.clip(np.searchsorted(edges, probs, side="right") - 1, 0, n_bins - 1)
    ece = 0.0
    mce = 0.0
    n = probs.size
    for b in range(n_bins):
        in_bin = idx == b
        count = int(in_bin.sum())
        if count == 0:
            continue
        conf = float(probs[in_bin].mean())
        acc = float(labels[in_bin].mean())
        gap = abs(acc - conf)
        ece += (count / n) * gap
        mce = max(mce, gap)
    brier = float(np.mean((probs - labels) ** 2))
    return {"ece": ece, "mce": mce, "brier": brier}


def decision_curve(
    probs: np.ndarray, labels: np.ndarray, threshold_grid: Sequence[float]
) -> dict:
    """Net benefit at each threshold plus treat-all / treat-none baselines.

    NB(t) = TP/N - (FP/N) * t/(1-t) with classification by p >= t.
    """
    probs, labels = _check_probs_labels(probs, labels)
    n = probs.size
    prevalence = float(labels.mean())
    rows = []
    for t in threshold_grid:
        if not 0.0 < t < 1.0:
            raise DataError(f"decision threshold {t} must lie in (0, 1)")
        preds = probs >= t
        tp = float(np.sum(preds & (labels == 1)))
        fp = float(np.sum(preds & (labels == 0)))
        odds = t / (1.0 - t)
        rows.append(
            {
                "threshold": float(t),
                "net_benefit": tp / n - (fp / n) * odds,
                "treat_all": prevalence - (1.0 - prevalence) * odds,
                "treat_none": 0.0,
            }
        )
    return {"prevalence": prevalence, "curve": rows}


def fold_ci(fold_values: Sequence[float], confidence: float = 0.95) -> dict:
    """Student-t interval over fold values (tabulated critical constants)."""
    if confidence != 0.95:
        raise DataError("only 95% confidence intervals are supported")
    values = np.asarray(list(fold_values), dtype=np.float64)
    n = values.size
    if n < 2:
        raise DataError("need at least 2 fold values")
    df = n - 1
    if df not in _T_TABLE_95:
        raise DataError(f"no tabulated t constant for df={df}")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    half_width = _T_TABLE_95[df] * s / math.sqrt(n)
    return {
        "mean": mean,
        "std": s,
        "half_width": half_width,
        "interval": (mean - half_width, mean + half_width),
    }


def effect_size(values_a: Sequence[float], values_b: Sequence[float]) -> dict:
    """Paired fold-wise mean difference and Cohen's d of the differences."""
    a = np.asarray(list(values_a), dtype=np.float64)
    b = np.asarray(list(values_b), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("paired fold vectors must have equal length")
    if a.size < 2:
        raise DataError("need at least 2 folds")
    diffs = a - b
    delta = float(diffs.mean())
    s = float(diffs.std(ddof=1))
    if s == 0.0:
        d = 0.0 if delta == 0.0 else math.inf * np.sign(delta)
        return {"delta": delta, "cohens_d": float(d), "infinite": delta != 0.0}
    return {"delta": delta, "cohens_d": delta / s, "infinite": False}


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(list(x), dtype=np.float64)
    y = np.asarray(list(y), dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DataError("need aligned vectors of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise DataError("zero variance input")
    return float((xc @ yc) / math.sqrt(vx * vy))
