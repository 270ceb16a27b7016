"""Flat, exactly-searched index of global subject embeddings with labels.

One entry per subject: the pose-averaged embedding with the age appended,
plus whatever labels the subject carries. Search is exact (full scan); the
corpora this serves are small enough that exactness costs nothing and buys
oracle-testability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .records import ANTHRO_TARGETS, AnthroLabels, DataError, SubjectRecord

KB_FORMAT_VERSION = 1
METRICS = ("cosine", "euclidean", "mahalanobis_diag")

# Diagonal-covariance shrinkage: var' = var + 1e-6 * mean(var).
_SHRINKAGE = 1e-6


@dataclass(frozen=True)
class KbEntry:
    subject_id: str
    embedding: np.ndarray  # (dim,)
    class_label: Optional[int] = None
    anthro: Optional[AnthroLabels] = None

    def validate(self) -> None:
        if not np.all(np.isfinite(self.embedding)):
            raise DataError(f"entry {self.subject_id}: non-finite embedding")
        if self.class_label is None and self.anthro is None:
            raise DataError(f"entry {self.subject_id}: at least one label required")
        if self.anthro is not None:
            self.anthro.validate()


@dataclass(frozen=True)
class Neighbor:
    entry: KbEntry
    distance: float


@dataclass(frozen=True)
class NeighborSet:
    neighbors: tuple[Neighbor, ...]
    requested_k: int
    clamped: bool  # True when the KB held fewer entries than requested

    def __len__(self) -> int:
        return len(self.neighbors)

    def distances(self) -> np.ndarray:
        return np.asarray([n.distance for n in self.neighbors], dtype=np.float64)


class KnowledgeBase:
    """Immutable labeled embedding corpus with an exact distance search."""

    def __init__(self, entries: Sequence[KbEntry], metric: str, variances: np.ndarray | None = None):
        if metric not in METRICS:
            raise DataError(f"unknown metric {metric!r}; expected one of {METRICS}")
        if len(entries) < 1:
            raise DataError("knowledge base needs at least one entry")
        dims = {e.embedding.shape for e in entries}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise DataError("entries must share one embedding dimension")
        for entry in entries:
            entry.validate()
        self._entries = tuple(entries)
        self._metric = metric
        self._dim = entries[0].embedding.shape[0]
        self._matrix = np.stack([e.embedding for e in entries]).astype(np.float64)
        if metric == "cosine":
            norms = np.linalg.norm(self._matrix, axis=1)
            if np.any(norms == 0):
                raise DataError("zero-norm embedding is not searchable under cosine")
            self._norms = norms
        else:
            self._norms = None
        if metric == "mahalanobis_diag":
            if variances is None:
                if len(entries) < 2:
                    raise DataError("mahalanobis_diag needs at least 2 entries")
                variances = self._matrix.var(axis=0, ddof=1)
            variances = np.asarray(variances, dtype=np.float64)
            mean_var = float(variances.mean())
            if mean_var == 0.0:
                raise DataError("degenerate knowledge base: zero variance in every dimension")
            self._variances = variances
            self._inv_shrunk = 1.0 / (variances + _SHRINKAGE * mean_var)
        else:
            self._variances = None
            self._inv_shrunk = None

    @property
    def entries(self) -> tuple[KbEntry, ...]:
        return self._entries

    @property
    def metric(self) -> str:
        return self._metric

    @property
    def dim(self) -> int:
        return self._dim

    def __len__(self) -> int:
        return len(self._entries)

    def distances(self, query: np.ndarray) -> np.ndarray:
        """Distance from the query to every entry, in insertion order."""
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self._dim,):
            raise DataError(f"query dimension {query.shape} does not match KB dim {self._dim}")
        if not np.all(np.isfinite(query)):
            raise DataError("non-finite query")
        if self._metric == "cosine":
            qnorm = float(np.linalg.norm(query))
            if qnorm == 0.0:
                raise DataError("zero-norm vector under cosine")
            return 1.0 - (self._matrix @ query) / (self._norms * qnorm)
        diff = self._matrix - query
        if self._metric == "euclidean":
            return np.sqrt(np.sum(diff * diff, axis=1))
        return np.sqrt(np.sum(diff * diff * self._inv_shrunk, axis=1))


def global_query_embedding(subject: SubjectRecord) -> np.ndarray:
    """Pose-averaged embedding with the age appended (dim 1025).

    Averaging the age-augmented node features equals averaging the raw pose
    embeddings and appending the age, because the age is constant per subject.
    """
    subject.validate()
    kinds = subject.ordered_poses()
    mean_emb = np.mean([subject.poses[k] for k in kinds], axis=0)
    return np.concatenate([mean_emb, [subject.age_months]])


def build_kb(records: Sequence[SubjectRecord], metric: str = "cosine") -> KnowledgeBase:
    """One entry per record; every record must carry at least one label."""
    entries = []
    for record in records:
        if not record.has_any_label():
            raise DataError(f"record {record.id} has no labels; cannot index")
        entries.append(
            KbEntry(
                subject_id=record.id,
                embedding=global_query_embedding(record),
                class_label=record.class_label,
                anthro=record.anthro,
            )
        )
    return KnowledgeBase(entries, metric=metric)


def search(kb: KnowledgeBase, query: np.ndarray, k: int) -> NeighborSet:
    """Exact top-k under the KB metric; ties resolve by insertion order."""
    if k < 1:
        raise DataError("k must be at least 1")
    dists = kb.distances(query)
    clamped = k > len(kb)
    k_eff = min(k, len(kb))
    order = np.argsort(dists, kind="stable")[:k_eff]
    neighbors = tuple(Neighbor(entry=kb.entries[i], distance=float(dists[i])) for i in order)
    return NeighborSet(neighbors=neighbors, requested_k=k, clamped=clamped)


# ---------------------------------------------------------------------------
# Serialization


def _entry_to_json(entry: KbEntry) -> dict:
    return {
        "subject_id": entry.subject_id,
        "embedding": entry.embedding.tolist(),
        "class_label": entry.class_label,
        "anthro": entry.anthro.as_dict() if entry.anthro is not None else None,
    }


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    doc = {
        "format_version": KB_FORMAT_VERSION,
        "dim": kb.dim,
        "metric": kb.metric,
        "count": len(kb),
        "variances": kb._variances.tolist() if kb._variances is not None else None,
        "entries": [_entry_to_json(e) for e in kb.entries],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_kb(path: str | Path) -> KnowledgeBase:
    path = Path(path)
    if not path.exists():
        raise DataError(f"knowledge base file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt knowledge base file: {exc.msg}") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise DataError("corrupt knowledge base file: missing header")
    if doc["format_version"] != KB_FORMAT_VERSION:
        raise DataError(
            f"unsupported knowledge base version {doc['format_version']}; "
            f"this build reads version {KB_FORMAT_VERSION}"
        )
    try:
        dim = int(doc["dim"])
        entries_json = doc["entries"]
        metric = doc["metric"]
        count = int(doc["count"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"corrupt knowledge base file: {exc}") from None
    if len(entries_json) != count:
        raise DataError(f"corrupt knowledge base file: header count {count} != {len(entries_json)} entries")
    entries = []
    for obj in entries_json:
        emb = np.asarray(obj["embedding"], dtype=np.float64)
        if emb.shape != (dim,):
            raise DataError(f"entry {obj.get('subject_id')}: dimension mismatch against header dim {dim}")
        anthro_json = obj.get("anthro")
        anthro = (
            AnthroLabels(**{t: anthro_json.get(t) for t in ANTHRO_TARGETS})
            if anthro_json is not None
            else None
        )
        entries.append(
            KbEntry(
                subject_id=obj["subject_id"],
                embedding=emb,
                class_label=obj.get("class_label"),
                anthro=anthro,
            )
        )
    variances = doc.get("variances")
    variances_arr = np.asarray(variances, dtype=np.float64) if variances is not None else None
    return KnowledgeBase(entries, metric=metric, variances=variances_arr)
