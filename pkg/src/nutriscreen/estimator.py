"""Scikit-learn style estimator facade over the screening pipeline.

`MalnutritionScreener` follows the sklearn contract (constructor params
mirrored to attributes, `fit` returns self, fitted state in
trailing-underscore attributes, `get_params`/`set_params`) without importing
sklearn, so it drops into pipelines and model-selection utilities that only
rely on the protocol. X is a list of SubjectRecord; labels travel inside the
records, so `y` is accepted and ignored.
"""

from __future__ import annotations

import inspect
from typing import Optional, Sequence

import numpy as np

from .kb import KnowledgeBase
from .pipeline import predict_subject
from .records import DataError, SubjectRecord
from .retrieval import RetrievalConfig
from .training import TrainConfig, train


def check_records(X: Sequence[SubjectRecord]) -> list[SubjectRecord]:
    """Validate an input collection of subject records."""
    if not isinstance(X, (list, tuple)):
        raise DataError("X must be a list of SubjectRecord")
    records = list(X)
    if not records:
        raise DataError("X is empty")
    seen = set()
    for record in records:
        if not isinstance(record, SubjectRecord):
            raise DataError(f"X contains a non-record element: {type(record).__name__}")
        record.validate()
        if record.id in seen:
            raise DataError(f"duplicate subject id {record.id!r}")
        seen.add(record.id)
    return records


def check_is_fitted(estimator: "MalnutritionScreener") -> None:
    if getattr(estimator, "model_", None) is None:
        raise DataError("this MalnutritionScreener instance is not fitted yet; call fit first")


class MalnutritionScreener:
    """Joint malnutrition classifier and anthropometric regressor.

    Parameters mirror the training configuration; `kb` is the external
    knowledge base queried at train and inference time (required unless
    retrieval_enabled=False).
    """

    def __init__(
        self,
        kb: Optional[KnowledgeBase] = None,
        batch_size: int = 8,
        max_epochs: int = 50,
        learning_rate: float = 1e-3,
        folds: int = 4,
        seed: int = 42,
        patience: int = 10,
        dropout: float = 0.1,
        heads: int = 8,
        layers: int = 2,
        head_dim: int = 64,
        k: int = 5,
        tau_class: float = 0.50,
        gamma: float = 1.50,
        tau_reg: float = 0.10,
        pos_weight_mode: str = "balanced",
        retrieval_enabled: bool = True,
        aux_weight: float = 0.5,
        fusion_space: str = "prob",
        age_scale: float = 1.0,
    ):
        self.kb = kb
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.folds = folds
        self.seed = seed
        self.patience = patience
        self.dropout = dropout
        self.heads = heads
        self.layers = layers
        self.head_dim = head_dim
        self.k = k
        self.tau_class = tau_class
        self.gamma = gamma
        self.tau_reg = tau_reg
        self.pos_weight_mode = pos_weight_mode
        self.retrieval_enabled = retrieval_enabled
        self.aux_weight = aux_weight
        self.fusion_space = fusion_space
        self.age_scale = age_scale
        self.model_ = None
        self.fold_reports_ = None
        self.summary_ = None

    # -- sklearn protocol -------------------------------------------------

    @classmethod
    def _get_param_names(cls) -> list[str]:
        signature = inspect.signature(cls.__init__)
        return [name for name in signature.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._get_param_names()}

    def set_params(self, **params) -> "MalnutritionScreener":
        valid = set(self._get_param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for estimator {type(self).__name__}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items() if k != "kb")
        return f"{type(self).__name__}({args})"

    # -- fitting and prediction -------------------------------------------

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            learning_rate=self.learning_rate,
            folds=self.folds,
            seed=self.seed,
            patience=self.patience,
            dropout=self.dropout,
            heads=self.heads,
            layers=self.layers,
            head_dim=self.head_dim,
            retrieval=RetrievalConfig(
                k=self.k, tau_class=self.tau_class, gamma=self.gamma, tau_reg=self.tau_reg
            ),
            pos_weight_mode=self.pos_weight_mode,
            retrieval_enabled=self.retrieval_enabled,
            aux_weight=self.aux_weight,
            fusion_space=self.fusion_space,
            age_scale=self.age_scale,
        )

    def fit(self, X: Sequence[SubjectRecord], y=None) -> "MalnutritionScreener":
        """Cross-validated training; keeps the fold model with the best
        validation loss as the operating model."""
        records = check_records(X)
        result = train(records, self.kb, self._train_config())
        best = min(
            range(len(result.fold_reports)),
            key=lambda i: (min(result.fold_reports[i].val_losses), i),
        )
        self.model_ = result.models[best]
        self.fold_reports_ = result.fold_reports
        self.summary_ = result.summary
        return self

    def _predict_one(self, record: SubjectRecord):
        return predict_subject(
            self.model_,
            self.kb,
            self._train_config().retrieval,
            record,
            retrieval_enabled=self.retrieval_enabled,
        )

    def predict(self, X: Sequence[SubjectRecord]) -> np.ndarray:
        """Class decisions (1 = malnourished) at the stored threshold."""
        check_is_fitted(self)
        records = check_records(X)
        probs = self.predict_proba(records)[:, 1]
        return (probs >= self.model_.threshold).astype(np.int64)

    def predict_proba(self, X: Sequence[SubjectRecord]) -> np.ndarray:
        """(n, 2) fused class probabilities, columns [healthy, malnourished]."""
        check_is_fitted(self)
        records = check_records(X)
        fused = np.asarray([self._predict_one(r).fused_probability for r in records])
        return np.column_stack([1.0 - fused, fused])

    def predict_measurements(self, X: Sequence[SubjectRecord]) -> np.ndarray:
        """(n, 4) fused anthropometric estimates in raw units."""
        check_is_fitted(self)
        records = check_records(X)
        return np.asarray([self._predict_one(r).fused_measurements for r in records])
