"""Two-layer multi-head graph attention network with analytic gradients.

The network is small and fixed in structure, so reverse-mode differentiation
is written out by hand instead of pulling in an autodiff framework: every
gradient is checkable against central finite differences, and training has
no dependencies beyond numpy.

Layer semantics: intermediate layers concatenate their heads and apply ELU;
the final layer averages heads with no output nonlinearity. Node outputs are
mean-pooled into a subject embedding feeding the classification and
regression heads. Attention-coefficient dropout (train mode only) drops
entries Bernoulli-style and renormalizes each row, so attention rows always
sum to one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graphs import PoseGraph
from .records import ANTHRO_TARGETS, DataError, NODE_DIM, TargetStats
from .retrieval import FUSION_INPUT_DIM, FusionMlpParams, LOG_ODDS_CLAMP

MODEL_FORMAT_VERSION = 1
LEAKY_SLOPE = 0.2
N_REG_TARGETS = len(ANTHRO_TARGETS)
_PROB_FLOOR = 1e-15


class GradientError(ArithmeticError):
    """Raised when a non-finite value appears during backpropagation."""


@dataclass(frozen=True)
class GatConfig:
    in_dim: int = NODE_DIM
    n_layers: int = 2
    heads: int = 8
    head_dim: int = 64
    dropout: float = 0.1
    fusion_hidden: int = 8
    age_scale: float = 1.0  # multiplies the metadata column (last input feature)
    fusion_space: str = "prob"  # "prob" or "logit"

    def validate(self) -> None:
        if self.in_dim < 1 or self.n_layers < 2 or self.heads < 1 or self.head_dim < 1:
            raise DataError("invalid architecture dimensions")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must lie in [0, 1)")
        if self.fusion_space not in ("prob", "logit"):
            raise DataError(f"unknown fusion space {self.fusion_space!r}")

    @property
    def pooled_dim(self) -> int:
        return self.head_dim

    def layer_in_dim(self, index: int) -> int:
        return self.in_dim if index == 0 else self.heads * self.head_dim


@dataclass
class GatLayerParams:
    weight: np.ndarray  # (in_dim, heads * head_dim)
    attn_src: np.ndarray  # (heads, head_dim)
    attn_dst: np.ndarray  # (heads, head_dim)
    heads: int
    head_dim: int
    concat: bool  # True: concat heads + ELU; False: head average, linear


@dataclass
class GatModel:
    config: GatConfig
    layers: list[GatLayerParams]
    cls_w: np.ndarray  # (pooled_dim,)
    cls_b: np.ndarray  # (1,)
    reg_w: np.ndarray  # (pooled_dim, 4)
    reg_b: np.ndarray  # (4,)
    fusion: FusionMlpParams
    alpha_reg_raw: np.ndarray  # (1,)
    threshold: float = 0.5
    target_stats: Optional[TargetStats] = None
    seed: int = 0

    @property
    def alpha_reg(self) -> float:
        return float(_sigmoid_scalar(float(self.alpha_reg_raw[0])))


@dataclass(frozen=True)
class GatForwardOutput:
    pooled: np.ndarray
    cls_logit: float
    reg: np.ndarray  # (4,) standardized units
    attentions: tuple[np.ndarray, ...]  # per layer, (n, n, heads); rows over axis 1 sum to 1


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(config: GatConfig, seed: int) -> GatModel:
    """Seeded initialization with a fixed draw order for reproducibility."""
    config.validate()
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(config.n_layers):
        in_dim = config.layer_in_dim(i)
        out_dim = config.heads * config.head_dim
        weight = _glorot(rng, in_dim, out_dim, (in_dim, out_dim))
        attn = _glorot(rng, 2 * config.head_dim, 1, (config.heads, 2 * config.head_dim))
        layers.append(
            GatLayerParams(
                weight=weight,
                attn_src=attn[:, : config.head_dim].copy(),
                attn_dst=attn[:, config.head_dim :].copy(),
                heads=config.heads,
                head_dim=config.head_dim,
                concat=(i < config.n_layers - 1),
            )
        )
    pooled = config.pooled_dim
    cls_w = _glorot(rng, pooled, 1, (pooled,))
    reg_w = _glorot(rng, pooled, N_REG_TARGETS, (pooled, N_REG_TARGETS))
    fusion = FusionMlpParams(
        w1=_glorot(rng, FUSION_INPUT_DIM, config.fusion_hidden, (FUSION_INPUT_DIM, config.fusion_hidden)),
        b1=np.zeros(config.fusion_hidden),
        w2=_glorot(rng, config.fusion_hidden, 1, (config.fusion_hidden,)),
        b2=np.zeros(1),
    )
    return GatModel(
        config=config,
        layers=layers,
        cls_w=cls_w,
        cls_b=np.zeros(1),
        reg_w=reg_w,
        reg_b=np.zeros(N_REG_TARGETS),
        fusion=fusion,
        alpha_reg_raw=np.zeros(1),
        threshold=0.5,
        target_stats=None,
        seed=seed,
    )


def named_params(model: GatModel) -> list[tuple[str, np.ndarray]]:
    """Canonical (path, array) listing; fixes update and gradient order."""
    params: list[tuple[str, np.ndarray]] = []
    for i, layer in enumerate(model.layers):
        params.append((f"layers.{i}.weight", layer.weight))
        params.append((f"layers.{i}.attn_src", layer.attn_src))
        params.append((f"layers.{i}.attn_dst", layer.attn_dst))
    params.extend(
        [
            ("cls_w", model.cls_w),
            ("cls_b", model.cls_b),
            ("reg_w", model.reg_w),
            ("reg_b", model.reg_b),
            ("fusion.w1", model.fusion.w1),
            ("fusion.b1", model.fusion.b1),
            ("fusion.w2", model.fusion.w2),
            ("fusion.b2", model.fusion.b2),
            ("alpha_reg_raw", model.alpha_reg_raw),
        ]
    )
    return params


class GradBuffer:
    """Named gradient views over one flat vector, laid out in canonical
    parameter order. The flat vector is what the optimizer consumes."""

    def __init__(self, model: GatModel):
        specs = [(path, arr.shape, arr.size) for path, arr in named_params(model)]
        self.flat = np.zeros(sum(size for _, _, size in specs))
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for path, shape, size in specs:
            self.views[path] = self.flat[offset : offset + size].reshape(shape)
            offset += size

    def __getitem__(self, path: str) -> np.ndarray:
        return self.views[path]

    def __setitem__(self, path: str, value: np.ndarray) -> None:
        view = self.views[path]
        if value is not view:  # in-place ops hand the view back; copy otherwise
            view[...] = value

    def __contains__(self, path: str) -> bool:
        return path in self.views

    def __iter__(self):
        return iter(self.views)

    def keys(self):
        return self.views.keys()

    def items(self):
        return self.views.items()

    def zero(self) -> None:
        self.flat.fill(0.0)


def zero_gradients(model: GatModel) -> GradBuffer:
    return GradBuffer(model)


# ---------------------------------------------------------------------------
# Activation primitives


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus(x: float) -> float:
    # log(1 + e^x), overflow-safe
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(x))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _leaky_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, LEAKY_SLOPE)


# ---------------------------------------------------------------------------
# Layer forward / backward


def sample_attention_mask(
    rng: np.random.Generator, n: int, heads: int, dropout: float, valid: np.ndarray
) -> np.ndarray:
    """Bernoulli keep-mask over attention entries; rows never fully drop."""
    keep = rng.random((n, n, heads)) >= dropout
    keep &= valid[:, :, None]
    dead = keep.sum(axis=1) == 0  # (n, heads)
    if np.any(dead):
        rows, heads_idx = np.nonzero(dead)
        for j, h in zip(rows, heads_idx):
            keep[j, :, h] = valid[j]
    return keep


def _attention_forward(
    zh: np.ndarray,
    adjacency_mask: np.ndarray,
    params: GatLayerParams,
    dropout_mask: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """Attention over one graph given transformed features zh (n, heads, dim).

    Returns (gathered (n, heads, dim), attention actually used, cache)."""
    s_src = np.einsum("nhd,hd->nh", zh, params.attn_src)
    s_dst = np.einsum("nhd,hd->nh", zh, params.attn_dst)
    e = s_src[:, None, :] + s_dst[None, :, :]  # (n, n, heads), e[j, k] scores neighbor k of j
    e_act = _leaky(e)

    valid = adjacency_mask[:, :, None]
    scores = np.where(valid, e_act, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    exp_scores = np.where(valid, np.exp(scores), 0.0)
    att = exp_scores / exp_scores.sum(axis=1, keepdims=True)  # (n, n, heads)

    if dropout_mask is not None:
        kept = att * dropout_mask
        row_sum = kept.sum(axis=1, keepdims=True)
        att_used = kept / row_sum
    else:
        att_used = att
        row_sum = None

    gathered = np.einsum("jkh,khd->jhd", att_used, zh)
    cache = {
        "zh": zh,
        "e": e,
        "valid": adjacency_mask,
        "att": att,
        "att_used": att_used,
        "dropout_mask": dropout_mask,
        "row_sum": row_sum,
    }
    return gathered, att_used, cache


def _attention_backward(
    d_gathered: np.ndarray, params: GatLayerParams, cache: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of _attention_forward; returns (d_zh, d_attn_src, d_attn_dst)."""
    zh = cache["zh"]
    att = cache["att"]
    att_used = cache["att_used"]
    mask = cache["dropout_mask"]

    d_att_used = np.einsum("jhd,khd->jkh", d_gathered, zh)
    d_zh = np.einsum("jkh,jhd->khd", att_used, d_gathered)

    if mask is not None:
        inner = (d_att_used * att_used).sum(axis=1, keepdims=True)
        d_att = (mask / cache["row_sum"]) * (d_att_used - inner)
    else:
        d_att = d_att_used

    # softmax rows over axis 1, restricted to valid entries
    inner = (d_att * att).sum(axis=1, keepdims=True)
    d_eact = att * (d_att - inner)
    d_e = d_eact * _leaky_grad(cache["e"])
    d_e = np.where(cache["valid"][:, :, None], d_e, 0.0)

    d_s_src = d_e.sum(axis=1)  # (n, heads)
    d_s_dst = d_e.sum(axis=0)
    d_attn_src = np.einsum("nh,nhd->hd", d_s_src, zh)
    d_attn_dst = np.einsum("nh,nhd->hd", d_s_dst, zh)
    d_zh = d_zh + d_s_src[:, :, None] * params.attn_src[None, :, :]
    d_zh = d_zh + d_s_dst[:, :, None] * params.attn_dst[None, :, :]
    return d_zh, d_attn_src, d_attn_dst


def gat_layer_forward(
    features: np.ndarray,
    adjacency_mask: np.ndarray,
    params: GatLayerParams,
    dropout_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """One attention layer.

    features: (n, in_dim); adjacency_mask: (n, n) bool with self-loops.
    Returns (output, attention, cache); attention is the coefficient tensor
    actually used for aggregation, rows over axis 1 summing to one.
    """
    n, in_dim = features.shape
    if params.weight.shape[0] != in_dim:
        raise DataError(
            f"feature dimension {in_dim} does not match layer input {params.weight.shape[0]}"
        )
    if adjacency_mask.shape != (n, n):
        raise DataError("adjacency mask shape mismatch")
    if not np.all(adjacency_mask.diagonal()):
        raise DataError("adjacency mask must include self-loops")
    h, d = params.heads, params.head_dim

    z = features @ params.weight  # (n, h*d)
    zh = z.reshape(n, h, d)
    gathered, att_used, cache = _attention_forward(zh, adjacency_mask, params, dropout_mask)
    if params.concat:
        pre = gathered.reshape(n, h * d)
        out = _elu(pre)
    else:
        pre = None
        out = gathered.mean(axis=1)
    cache["features"] = features
    cache["pre"] = pre
    return out, att_used, cache


# ---------------------------------------------------------------------------
# Batched trunk. Two levels of batching keep the per-subject overhead low:
# every graph of the batch shares each layer's weight matmul, and graphs with
# the same node count run their attention as one vectorized block.


def _group_graphs(graph_slices: list[tuple[int, int]]) -> list[tuple[int, list[int], np.ndarray]]:
    """Group graph indices by node count; rows are the stacked node indices."""
    by_size: dict[int, list[int]] = {}
    for g, (start, end) in enumerate(graph_slices):
        by_size.setdefault(end - start, []).append(g)
    groups = []
    for n in sorted(by_size):
        members = by_size[n]
        rows = np.concatenate(
            [np.arange(graph_slices[g][0], graph_slices[g][1]) for g in members]
        )
        groups.append((n, members, rows))
    return groups


def _group_attention_forward(
    zh: np.ndarray,
    valid: np.ndarray,
    params: GatLayerParams,
    dropout_mask: np.ndarray | None,
) -> tuple[np.ndarray, dict]:
    """Attention for a stack of same-size graphs; zh is (b, n, heads, dim)."""
    s_src = np.einsum("bnhd,hd->bnh", zh, params.attn_src)
    s_dst = np.einsum("bnhd,hd->bnh", zh, params.attn_dst)
    e = s_src[:, :, None, :] + s_dst[:, None, :, :]  # (b, n, n, heads)
    e_act = _leaky(e)

    scores = np.where(valid, e_act, -np.inf)
    scores = scores - scores.max(axis=2, keepdims=True)
    exp_scores = np.where(valid, np.exp(scores), 0.0)
    att = exp_scores / exp_scores.sum(axis=2, keepdims=True)

    if dropout_mask is not None:
        kept = att * dropout_mask
        row_sum = kept.sum(axis=2, keepdims=True)
        att_used = kept / row_sum
    else:
        att_used = att
        row_sum = None

    # gathered[b,j,h,:] = sum_k att_used[b,j,k,h] * zh[b,k,h,:], as batched matmul
    zh_h = np.ascontiguousarray(zh.transpose(0, 2, 1, 3))  # (b, h, n, d)
    att_h = np.ascontiguousarray(att_used.transpose(0, 3, 1, 2))  # (b, h, j, k)
    gathered = np.matmul(att_h, zh_h).transpose(0, 2, 1, 3)  # (b, j, h, d)
    cache = {
        "zh": zh,
        "zh_h": zh_h,
        "att_h": att_h,
        "e": e,
        "valid": valid,
        "att": att,
        "att_used": att_used,
        "dropout_mask": dropout_mask,
        "row_sum": row_sum,
    }
    return gathered, cache


def _group_attention_backward(
    d_gathered: np.ndarray, params: GatLayerParams, cache: dict
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    zh = cache["zh"]
    zh_h = cache["zh_h"]
    att = cache["att"]
    mask = cache["dropout_mask"]

    d_gathered_h = np.ascontiguousarray(d_gathered.transpose(0, 2, 1, 3))  # (b, h, j, d)
    # d_att_used[b,j,k,h] = d_gathered[b,j,h,:] . zh[b,k,h,:]
    d_att_used = np.matmul(d_gathered_h, zh_h.transpose(0, 1, 3, 2)).transpose(0, 2, 3, 1)
    # d_zh from the aggregation term: att_used^T @ d_gathered per head
    d_zh = np.matmul(cache["att_h"].transpose(0, 1, 3, 2), d_gathered_h).transpose(0, 2, 1, 3)

    if mask is not None:
        att_used = cache["att_used"]
        inner = (d_att_used * att_used).sum(axis=2, keepdims=True)
        d_att = (mask / cache["row_sum"]) * (d_att_used - inner)
    else:
        d_att = d_att_used

    inner = (d_att * att).sum(axis=2, keepdims=True)
    d_eact = att * (d_att - inner)
    d_e = d_eact * _leaky_grad(cache["e"])
    d_e = np.where(cache["valid"], d_e, 0.0)

    d_s_src = d_e.sum(axis=2)  # (b, n, heads)
    d_s_dst = d_e.sum(axis=1)
    d_attn_src = np.einsum("bnh,bnhd->hd", d_s_src, zh)
    d_attn_dst = np.einsum("bnh,bnhd->hd", d_s_dst, zh)
    d_zh = d_zh + d_s_src[..., None] * params.attn_src[None, None, :, :]
    d_zh = d_zh + d_s_dst[..., None] * params.attn_dst[None, None, :, :]
    return d_zh, d_attn_src, d_attn_dst


def _batched_layer_forward(
    x_all: np.ndarray,
    groups: list[tuple[int, list[int], np.ndarray]],
    adj_list: list[np.ndarray],
    params: GatLayerParams,
    dropout_masks: list[np.ndarray] | None,
) -> tuple[np.ndarray, dict]:
    h, d = params.heads, params.head_dim
    n_total = x_all.shape[0]
    z_all = x_all @ params.weight
    gathered_all = np.empty((n_total, h, d))
    group_caches = []
    for n, members, rows in groups:
        b = len(members)
        zh = z_all[rows].reshape(b, n, h, d)
        valid = np.stack([adj_list[g] for g in members])[:, :, :, None]
        mask = None
        if dropout_masks is not None:
            mask = np.stack([dropout_masks[g] for g in members])
        gathered, cache = _group_attention_forward(zh, valid, params, mask)
        gathered_all[rows] = gathered.reshape(b * n, h, d)
        group_caches.append(cache)
    if params.concat:
        pre_all = gathered_all.reshape(n_total, h * d)
        out_all = _elu(pre_all)
    else:
        pre_all = None
        out_all = gathered_all.mean(axis=1)
    return out_all, {"x_all": x_all, "group_caches": group_caches, "pre_all": pre_all}


def _batched_layer_backward(
    d_out_all: np.ndarray,
    params: GatLayerParams,
    cache: dict,
    groups: list[tuple[int, list[int], np.ndarray]],
    need_dx: bool,
    out_weight: np.ndarray,
    out_attn_src: np.ndarray,
    out_attn_dst: np.ndarray,
) -> np.ndarray | None:
    """Writes parameter gradients into the provided (zeroed) views."""
    h, d = params.heads, params.head_dim
    n_total = d_out_all.shape[0]
    if params.concat:
        d_pre = d_out_all * _elu_grad(cache["pre_all"])
        d_gathered_all = d_pre.reshape(n_total, h, d)
    else:
        d_gathered_all = np.broadcast_to(
            d_out_all[:, None, :] / h, (n_total, h, d)
        )
    d_z_all = np.empty((n_total, h * d))
    for (n, members, rows), group_cache in zip(groups, cache["group_caches"]):
        b = len(members)
        d_gathered = d_gathered_all[rows].reshape(b, n, h, d)
        d_zh, da_src, da_dst = _group_attention_backward(d_gathered, params, group_cache)
        d_z_all[rows] = d_zh.reshape(b * n, h * d)
        out_attn_src += da_src
        out_attn_dst += da_dst
    np.matmul(cache["x_all"].T, d_z_all, out=out_weight)
    return d_z_all @ params.weight.T if need_dx else None


# ---------------------------------------------------------------------------
# Whole-model forward


def _input_features(graph: PoseGraph, config: GatConfig) -> np.ndarray:
    x = graph.node_features.astype(np.float64, copy=True)
    if config.age_scale != 1.0:
        x[:, -1] *= config.age_scale
    return x


def model_forward(
    graph: PoseGraph,
    model: GatModel,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> GatForwardOutput:
    """Pure eval-mode forward unless train_mode (attention dropout needs rng)."""
    config = model.config
    x = _input_features(graph, config)
    if x.shape[1] != config.in_dim:
        raise DataError(f"graph feature dim {x.shape[1]} does not match model input {config.in_dim}")
    adjacency = graph.adjacency_mask()
    n = x.shape[0]

    attentions = []
    current = x
    for layer in model.layers:
        dropout_mask = None
        if train_mode and config.dropout > 0.0:
            if rng is None:
                raise DataError("train-mode forward requires an rng for dropout")
            dropout_mask = sample_attention_mask(rng, n, layer.heads, config.dropout, adjacency)
        current, att, _ = gat_layer_forward(current, adjacency, layer, dropout_mask)
        attentions.append(att)

    pooled = current.mean(axis=0)
    cls_logit = float(model.cls_w @ pooled + model.cls_b[0])
    reg = pooled @ model.reg_w + model.reg_b
    return GatForwardOutput(
        pooled=pooled, cls_logit=cls_logit, reg=reg, attentions=tuple(attentions)
    )


# ---------------------------------------------------------------------------
# Loss primitives (shared by value-only and gradient paths)


def weighted_bce_with_logits(logit: float, label: float, pos_weight: float) -> float:
    """pos_weight * y * softplus(-z) + (1 - y) * softplus(z)."""
    return pos_weight * label * _softplus(-logit) + (1.0 - label) * _softplus(logit)


def bce_on_probability(p: float, label: float, pos_weight: float) -> float:
    """BCE of a probability; equals BCE-with-logits applied to its log-odds."""
    p = min(max(p, _PROB_FLOOR), 1.0 - _PROB_FLOOR)
    return -(pos_weight * label * math.log(p) + (1.0 - label) * math.log(1.0 - p))


def _sigmoid_vec(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _wbce_logits_vec(z: np.ndarray, y: np.ndarray, pos_weight: float) -> np.ndarray:
    return pos_weight * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)


def _wbce_logits_grad_vec(z: np.ndarray, y: np.ndarray, pos_weight: float) -> np.ndarray:
    s = _sigmoid_vec(z)
    return -pos_weight * y * (1.0 - s) + (1.0 - y) * s


def _clamped_log_odds_vec(p: np.ndarray) -> np.ndarray:
    pc = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        odds = np.log(pc) - np.log1p(-pc)
    return np.clip(odds, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)


# ---------------------------------------------------------------------------
# Joint loss over a batch, with gradients for every parameter


@dataclass(frozen=True)
class SubjectRetrieval:
    """Retrieval outputs for one subject; fixed during training (no gradient)."""

    y_cls: Optional[float]  # None when no neighbor carries a class label
    reg_std: np.ndarray  # (4,) retrieved measurements, standardized
    reg_valid: np.ndarray  # (4,) bool
    mean_distance: float


@dataclass(frozen=True)
class BatchItem:
    graph: PoseGraph
    class_label: Optional[int]
    reg_targets_std: np.ndarray  # (4,) standardized truth; ignored where mask is False
    reg_mask: np.ndarray  # (4,) bool
    retrieval: Optional[SubjectRetrieval]  # None disables fusion for this subject
    # optional precomputed trunk inputs (must match the model's config); items
    # are reused every epoch, so caching these saves per-step rebuild cost
    features: Optional[np.ndarray] = None
    adjacency: Optional[np.ndarray] = None


def batch_loss_and_grads(
    items: Sequence[BatchItem],
    model: GatModel,
    pos_weight: float = 1.0,
    aux_weight: float = 0.5,
    compute_grads: bool = True,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    grad_buffer: Optional[GradBuffer] = None,
) -> tuple[float, dict[str, float], Optional[GradBuffer]]:
    """Joint loss (classification + regression, fused + auxiliary) and gradients.

    Classification: BCE on the fused probability (positive class weighted by
    pos_weight), averaged over class-labeled subjects. Regression: mean squared
    error of the fused standardized predictions over present targets. When a
    subject carries retrieval outputs, auxiliary BCE/MSE terms on the raw model
    head outputs are added with weight aux_weight. Absent labels contribute
    nothing; a batch with no labels at all is an error.
    """
    if not items:
        raise DataError("empty batch")
    config = model.config
    space = config.fusion_space
    alpha_reg = model.alpha_reg

    n_cls = sum(1 for it in items if it.class_label is not None)
    n_reg = int(sum(int(it.reg_mask.sum()) for it in items))
    if n_cls == 0 and n_reg == 0:
        raise DataError("batch carries no labels")

    # batched trunk forward: one weight matmul per layer for the whole batch
    feats = []
    adj_list = []
    graph_slices = []
    offset = 0
    for item in items:
        x = item.features if item.features is not None else _input_features(item.graph, config)
        if x.shape[1] != config.in_dim:
            raise DataError(
                f"graph feature dim {x.shape[1]} does not match model input {config.in_dim}"
            )
        feats.append(x)
        adj_list.append(
            item.adjacency if item.adjacency is not None else item.graph.adjacency_mask()
        )
        graph_slices.append((offset, offset + x.shape[0]))
        offset += x.shape[0]
    x_all = np.vstack(feats)
    groups = _group_graphs(graph_slices)

    current = x_all
    layer_caches = []
    for layer in model.layers:
        dropout_masks = None
        if train_mode and config.dropout > 0.0:
            if rng is None:
                raise DataError("train-mode forward requires an rng for dropout")
            dropout_masks = [
                sample_attention_mask(rng, adj.shape[0], layer.heads, config.dropout, adj)
                for adj in adj_list
            ]
        current, cache = _batched_layer_forward(current, groups, adj_list, layer, dropout_masks)
        layer_caches.append(cache)

    grads = None
    if compute_grads:
        grads = grad_buffer if grad_buffer is not None else GradBuffer(model)
        grads.zero()

    # pooled embeddings and head outputs for the whole batch at once
    n_items = len(items)
    pooled_all = np.empty((n_items, current.shape[1]))
    for i, (start, end) in enumerate(graph_slices):
        pooled_all[i] = current[start:end].mean(axis=0)
    logits = pooled_all @ model.cls_w + model.cls_b[0]  # (b,)
    reg_all = pooled_all @ model.reg_w + model.reg_b  # (b, 4)

    # per-item constants stacked into arrays
    has_cls = np.asarray([it.class_label is not None for it in items])
    y = np.asarray(
        [float(it.class_label) if it.class_label is not None else 0.0 for it in items]
    )
    has_ret = np.asarray([it.retrieval is not None for it in items])
    y_ret = np.asarray(
        [
            it.retrieval.y_cls
            if it.retrieval is not None and it.retrieval.y_cls is not None
            else np.nan
            for it in items
        ]
    )
    dbar = np.asarray(
        [it.retrieval.mean_distance if it.retrieval is not None else 0.0 for it in items]
    )
    ret_std = np.stack(
        [
            it.retrieval.reg_std if it.retrieval is not None else np.zeros(N_REG_TARGETS)
            for it in items
        ]
    )
    ret_valid = np.stack(
        [
            it.retrieval.reg_valid
            if it.retrieval is not None
            else np.zeros(N_REG_TARGETS, dtype=bool)
            for it in items
        ]
    )
    reg_mask = np.stack([it.reg_mask for it in items]).astype(bool)
    truth = np.stack([it.reg_targets_std for it in items])

    fused_set = has_cls & has_ret & ~np.isnan(y_ret)
    raw_set = has_cls & ~fused_set  # fused path degenerates to the raw logit
    aux_set = has_cls & has_ret

    d_logits = np.zeros(n_items) if compute_grads else None
    d_reg_all = np.zeros((n_items, N_REG_TARGETS)) if compute_grads else None
    loss_cls = 0.0
    loss_reg = 0.0
    loss_cls_aux = 0.0
    loss_reg_aux = 0.0
    d_alpha_reg_total = 0.0

    # --- classification through the fusion gate ---
    if fused_set.any():
        idx = np.nonzero(fused_set)[0]
        l_f = logits[idx]
        yr = y_ret[idx]
        yv = y[idx]
        log_odds = np.clip(l_f, -LOG_ODDS_CLAMP, LOG_ODDS_CLAMP)
        gate_in = np.stack([l_f, yr, log_odds, dbar[idx]], axis=1)
        hidden = np.tanh(gate_in @ model.fusion.w1 + model.fusion.b1)
        gate_out = hidden @ model.fusion.w2 + model.fusion.b2[0]
        alpha = _sigmoid_vec(gate_out)
        if space == "prob":
            s = _sigmoid_vec(l_f)
            p = np.clip(alpha * s + (1.0 - alpha) * yr, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
            loss_cls += float(
                np.sum(-(pos_weight * yv * np.log(p) + (1.0 - yv) * np.log1p(-p)))
            )
            if compute_grads:
                d_p = (-pos_weight * yv / p + (1.0 - yv) / (1.0 - p)) / n_cls
                d_alpha = (s - yr) * d_p
                d_l = alpha * s * (1.0 - s) * d_p
        else:
            q = _clamped_log_odds_vec(yr)
            z = alpha * l_f + (1.0 - alpha) * q
            loss_cls += float(np.sum(_wbce_logits_vec(z, yv, pos_weight)))
            if compute_grads:
                d_z = _wbce_logits_grad_vec(z, yv, pos_weight) / n_cls
                d_alpha = (l_f - q) * d_z
                d_l = alpha * d_z
        if compute_grads:
            d_gate_out = alpha * (1.0 - alpha) * d_alpha
            grads["fusion.w2"] += hidden.T @ d_gate_out
            grads["fusion.b2"][0] += float(d_gate_out.sum())
            d_hidden = np.outer(d_gate_out, model.fusion.w2)
            d_u = (1.0 - hidden * hidden) * d_hidden
            grads["fusion.w1"] += gate_in.T @ d_u
            grads["fusion.b1"] += d_u.sum(axis=0)
            d_gate_in = d_u @ model.fusion.w1.T  # (b_fused, 4)
            d_l = d_l + d_gate_in[:, 0] + d_gate_in[:, 2] * (np.abs(l_f) < LOG_ODDS_CLAMP)
            d_logits[idx] += d_l

    # --- classification on the raw logit (no usable retrieval) ---
    if raw_set.any():
        idx = np.nonzero(raw_set)[0]
        loss_cls += float(np.sum(_wbce_logits_vec(logits[idx], y[idx], pos_weight)))
        if compute_grads:
            d_logits[idx] += _wbce_logits_grad_vec(logits[idx], y[idx], pos_weight) / n_cls

    # --- auxiliary classification on the raw head ---
    if aux_set.any():
        idx = np.nonzero(aux_set)[0]
        loss_cls_aux += float(np.sum(_wbce_logits_vec(logits[idx], y[idx], pos_weight)))
        if compute_grads:
            d_logits[idx] += (
                aux_weight * _wbce_logits_grad_vec(logits[idx], y[idx], pos_weight) / n_cls
            )

    # --- regression, fused where retrieval carries the target ---
    if n_reg > 0:
        use_ret = reg_mask & ret_valid & has_ret[:, None]
        use_raw = reg_mask & ~use_ret
        fused = alpha_reg * reg_all + (1.0 - alpha_reg) * ret_std
        diff_fused = np.where(use_ret, fused - truth, 0.0)
        diff_raw = np.where(use_raw, reg_all - truth, 0.0)
        loss_reg += float(np.sum(diff_fused * diff_fused) + np.sum(diff_raw * diff_raw))
        aux_mask = reg_mask & has_ret[:, None]
        diff_aux = np.where(aux_mask, reg_all - truth, 0.0)
        loss_reg_aux += float(np.sum(diff_aux * diff_aux))
        if compute_grads:
            d_fused = 2.0 * diff_fused / n_reg
            d_alpha_reg_total += float(np.sum((reg_all - ret_std) * d_fused))
            d_reg_all += (
                alpha_reg * d_fused + 2.0 * diff_raw / n_reg + aux_weight * 2.0 * diff_aux / n_reg
            )

    # --- heads backward, then the shared trunk ---
    if compute_grads:
        any_logit = bool(np.any(d_logits))
        any_reg = bool(np.any(d_reg_all))
        if any_logit:
            grads["cls_w"] += pooled_all.T @ d_logits
            grads["cls_b"][0] += float(d_logits.sum())
        if any_reg:
            grads["reg_w"] += pooled_all.T @ d_reg_all
            grads["reg_b"] += d_reg_all.sum(axis=0)
        if any_logit or any_reg:
            d_pooled_all = np.outer(d_logits, model.cls_w) + d_reg_all @ model.reg_w.T
            d_nodes = np.empty_like(current)
            for i, (start, end) in enumerate(graph_slices):
                d_nodes[start:end] = d_pooled_all[i] / (end - start)
            for i in reversed(range(len(model.layers))):
                d_nodes = _batched_layer_backward(
                    d_nodes,
                    model.layers[i],
                    layer_caches[i],
                    groups,
                    need_dx=i > 0,
                    out_weight=grads[f"layers.{i}.weight"],
                    out_attn_src=grads[f"layers.{i}.attn_src"],
                    out_attn_dst=grads[f"layers.{i}.attn_dst"],
                )
        if d_alpha_reg_total != 0.0:
            grads["alpha_reg_raw"][0] += alpha_reg * (1.0 - alpha_reg) * d_alpha_reg_total

    loss_cls = loss_cls / n_cls if n_cls else 0.0
    loss_cls_aux = loss_cls_aux / n_cls if n_cls else 0.0
    loss_reg = loss_reg / n_reg if n_reg else 0.0
    loss_reg_aux = loss_reg_aux / n_reg if n_reg else 0.0
    total = loss_cls + loss_reg + aux_weight * (loss_cls_aux + loss_reg_aux)
    breakdown = {
        "class": loss_cls,
        "reg": loss_reg,
        "class_aux": loss_cls_aux,
        "reg_aux": loss_reg_aux,
        "total": total,
    }
    if compute_grads and not np.all(np.isfinite(grads.flat)):
        for path, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise GradientError(f"non-finite gradient at {path}")
    if not math.isfinite(total):
        raise GradientError("non-finite loss")
    return total, breakdown, grads


# ---------------------------------------------------------------------------
# Checkpoints


def _stats_to_json(stats: Optional[TargetStats]) -> Optional[dict]:
    if stats is None:
        return None
    return {"means": stats.means, "stds": stats.stds}


def _stats_from_json(obj: Optional[dict]) -> Optional[TargetStats]:
    if obj is None:
        return None
    return TargetStats(means=dict(obj["means"]), stds=dict(obj["stds"]))


def save_model(model: GatModel, path: str | Path) -> None:
    """Versioned JSON checkpoint; float text round-trips exactly."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": {
            "in_dim": model.config.in_dim,
            "n_layers": model.config.n_layers,
            "heads": model.config.heads,
            "head_dim": model.config.head_dim,
            "dropout": model.config.dropout,
            "fusion_hidden": model.config.fusion_hidden,
            "age_scale": model.config.age_scale,
            "fusion_space": model.config.fusion_space,
        },
        "params": {
            path_: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
            for path_, arr in named_params(model)
        },
        "threshold": model.threshold,
        "target_stats": _stats_to_json(model.target_stats),
        "seed": model.seed,
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path: str | Path) -> GatModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt model file: {exc.msg}") from None
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model version {doc.get('format_version')}")
    config = GatConfig(**doc["config"])
    model = init_model(config, seed=int(doc["seed"]))
    model.threshold = float(doc["threshold"])
    model.target_stats = _stats_from_json(doc.get("target_stats"))
    stored = doc["params"]
    for path_, arr in named_params(model):
        entry = stored.get(path_)
        if entry is None:
            raise DataError(f"model file missing parameter {path_}")
        values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        if values.shape != arr.shape:
            raise DataError(f"parameter {path_} has shape {values.shape}, expected {arr.shape}")
        arr[...] = values
    return model


def clone_params(model: GatModel) -> dict[str, np.ndarray]:
    return {path: arr.copy() for path, arr in named_params(model)}


def restore_params(model: GatModel, snapshot: dict[str, np.ndarray]) -> None:
    for path, arr in named_params(model):
        arr[...] = snapshot[path]
