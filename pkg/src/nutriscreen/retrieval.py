"""Distance-weighted retrieval predictions and their fusion with model outputs.

Classification: neighbor distances pass through a temperature softmax, the
malnourished class gets a multiplicative boost, weights are renormalized and
the retrieved score is the weighted label mean. Regression: per-target
temperature-softmax weighting of neighbor measurements, with per-target
masking when a neighbor lacks a measurement. A small gate network blends the
model and retrieval scores; a learned scalar blends the regressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kb import NeighborSet
from .records import ANTHRO_TARGETS, DataError

LOG_ODDS_CLAMP = 30.0
FUSION_INPUT_DIM = 4  # [model logit, retrieved score, model log-odds, mean distance]


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 5
    tau_class: float = 0.50
    gamma: float = 1.50
    tau_reg: float = 0.10

    def validate(self) -> None:
        if self.k < 1:
            raise DataError("k must be at least 1")
        if self.tau_class <= 0:
            raise DataError("tau_class must be positive")
        if self.tau_reg <= 0:
            raise DataError("tau_reg must be positive")
        if self.gamma < 1:
            raise DataError("gamma must be at least 1")


@dataclass(frozen=True)
class ContextVector:
    gat_log_odds: float
    mean_distance: float

    def as_array(self) -> np.ndarray:
        return np.asarray([self.gat_log_odds, self.mean_distance], dtype=np.float64)


@dataclass(frozen=True)
class FusionMlpParams:
    """Gate network 4 -> hidden (tanh) -> 1 (sigmoid)."""

    w1: np.ndarray  # (FUSION_INPUT_DIM, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)


@dataclass(frozen=True)
class FusionOutput:
    alpha_cls: float
    fused_cls: float  # probability
    alpha_reg: float
    fused_reg: np.ndarray  # (4,) raw units
    y_retrieved_cls: Optional[float]
    y_retrieved_reg: np.ndarray  # (4,) raw units; meaningful where valid
    reg_valid: np.ndarray  # (4,) bool


def _temperature_softmax(distances: np.ndarray, tau: float) -> np.ndarray:
    """softmax of -d/tau, stabilized; sharpens toward the nearest as tau -> 0."""
    scores = -distances / tau
    scores -= scores.max()
    weights = np.exp(scores)
    return weights / weights.sum()


def retrieval_classify(neighbors: NeighborSet, cfg: RetrievalConfig) -> tuple[float, np.ndarray]:
    """Boosted distance-weighted label mean over class-labeled neighbors.

    Returns the retrieved score and a weight per neighbor (zero for neighbors
    without a class label, which are excluded before weighting).
    """
    cfg.validate()
    labeled = [i for i, n in enumerate(neighbors.neighbors) if n.entry.class_label is not None]
    if not labeled:
        raise DataError("no class-labeled neighbors to classify from")
    dists = np.asarray([neighbors.neighbors[i].distance for i in labeled], dtype=np.float64)
    labels = np.asarray(
        [neighbors.neighbors[i].entry.class_label for i in labeled], dtype=np.float64
    )
    base = _temperature_softmax(dists, cfg.tau_class)
    boost = np.where(labels == 1.0, cfg.gamma, 1.0)
    boosted = base * boost
    boosted /= boosted.sum()
    weights = np.zeros(len(neighbors), dtype=np.float64)
    weights[labeled] = boosted
    # the weighted label mean is a probability; renormalization can overshoot
    # 1.0 by an ulp when every neighbor is positive
    score = float(min(max(boosted @ labels, 0.0), 1.0))
    return score, weights


def retrieval_regress(
    neighbors: NeighborSet, cfg: RetrievalConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-target distance-weighted mean of neighbor measurements (raw units).

    Weights are renormalized over the neighbors that carry each target; a
    target no neighbor carries comes back flagged invalid.
    """
    cfg.validate()
    values = np.zeros(len(ANTHRO_TARGETS), dtype=np.float64)
    valid = np.zeros(len(ANTHRO_TARGETS), dtype=bool)
    for t_idx, target in enumerate(ANTHRO_TARGETS):
        have = [
            (n.distance, getattr(n.entry.anthro, target))
            for n in neighbors.neighbors
            if n.entry.anthro is not None and getattr(n.entry.anthro, target) is not None
        ]
        if not have:
            continue
        dists = np.asarray([d for d, _ in have], dtype=np.float64)
        obs = np.asarray([v for _, v in have], dtype=np.float64)
        weights = _temperature_softmax(dists, cfg.tau_reg)
        values[t_idx] = float(weights @ obs)
        valid[t_idx] = True
    return values, valid


def make_context(gat_logit: float, neighbors: NeighborSet) -> ContextVector:
    """Model log-odds (the logit itself, clamped) and mean neighbor distance."""
    if len(neighbors) == 0:
        raise DataError("empty neighbor set")
    clamped = float(np.clip(gat_logit, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))
    return ContextVector(gat_log_odds=clamped, mean_distance=float(neighbors.distances().mean()))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def fusion_gate(features: np.ndarray, params: FusionMlpParams) -> tuple[float, dict]:
    """Gate forward pass; the cache carries intermediates for backprop."""
    hidden = np.tanh(features @ params.w1 + params.b1)
    out = float(hidden @ params.w2 + params.b2[0])
    alpha = _sigmoid(out)
    cache = {"features": features, "hidden": hidden, "alpha": alpha}
    return alpha, cache


def fuse_classification(
    gat_logit: float,
    y_retrieved: float,
    ctx: ContextVector,
    params: FusionMlpParams,
    space: str = "prob",
) -> tuple[float, float]:
    """Blend the model and retrieved scores with the learned gate.

    In "prob" space the blend is alpha * sigmoid(logit) + (1 - alpha) * retrieved.
    In "logit" space the retrieved score is mapped to clamped log-odds and the
    blend happens on logits before the final sigmoid. Both return a probability.
    """
    if not (math.isfinite(gat_logit) and math.isfinite(y_retrieved)):
        raise DataError("non-finite fusion inputs")
    features = np.asarray(
        [gat_logit, y_retrieved, ctx.gat_log_odds, ctx.mean_distance], dtype=np.float64
    )
    alpha, _ = fusion_gate(features, params)
    if space == "prob":
        fused = alpha * _sigmoid(gat_logit) + (1.0 - alpha) * y_retrieved
    elif space == "logit":
        retrieved_logit = _clamped_log_odds(y_retrieved)
        fused = _sigmoid(alpha * gat_logit + (1.0 - alpha) * retrieved_logit)
    else:
        raise DataError(f"unknown fusion space {space!r}")
    if not math.isfinite(fused):
        raise DataError("non-finite fusion output")
    return alpha, fused


def _clamped_log_odds(p: float) -> float:
    p = min(max(p, 0.0), 1.0)
    if p <= 0.0:
        return -LOG_ODDS_CLAMP
    if p >= 1.0:
        return LOG_ODDS_CLAMP
    return float(np.clip(math.log(p / (1.0 - p)), -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))


def fuse_regression(
    gat_reg_raw: np.ndarray,
    retrieved_raw: np.ndarray,
    retrieved_valid: np.ndarray,
    alpha_reg: float,
) -> np.ndarray:
    """Componentwise convex blend; invalid retrievals fall back to the model value."""
    gat_reg_raw = np.asarray(gat_reg_raw, dtype=np.float64)
    retrieved_raw = np.asarray(retrieved_raw, dtype=np.float64)
    fused = alpha_reg * gat_reg_raw + (1.0 - alpha_reg) * retrieved_raw
    return np.where(retrieved_valid, fused, gat_reg_raw)
