"""Pose graphs: one fully connected graph per subject.

Nodes carry the 1025-d age-augmented pose features (embedding with the age
appended as the last entry). Every pair of poses is joined by an undirected
edge and every node has a self-loop, so attention is well defined even for a
single-pose subject.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .records import DataError, NODE_DIM, PoseKind, SubjectRecord

POSE_FAMILIES: dict[str, frozenset[PoseKind]] = {
    "frontal": frozenset(
        {PoseKind.FRONTAL_1, PoseKind.FRONTAL_2, PoseKind.FRONTAL_3, PoseKind.FRONTAL_4}
    ),
    "lateral": frozenset({PoseKind.LATERAL_LEFT, PoseKind.LATERAL_RIGHT}),
    "selfie": frozenset({PoseKind.SELFIE}),
    "back": frozenset({PoseKind.POSTERIOR}),
}


@dataclass(frozen=True)
class PoseGraph:
    subject_id: str
    node_features: np.ndarray  # (n_nodes, NODE_DIM)
    node_poses: tuple[PoseKind, ...]
    edges: tuple[tuple[int, int], ...]  # undirected pair edges, j < k; self-loops implicit

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def adjacency_mask(self) -> np.ndarray:
        """Dense neighbor mask including self-loops; mask[j, k] means k feeds j."""
        n = self.n_nodes
        mask = np.zeros((n, n), dtype=bool)
        for j, k in self.edges:
            mask[j, k] = True
            mask[k, j] = True
        np.fill_diagonal(mask, True)
        return mask


def build_subject_graph(subject: SubjectRecord) -> PoseGraph:
    """Complete undirected graph over the subject's poses, canonical node order."""
    subject.validate()
    kinds = subject.ordered_poses()
    n = len(kinds)
    features = np.empty((n, NODE_DIM), dtype=np.float64)
    for row, kind in enumerate(kinds):
        features[row, :-1] = subject.poses[kind]
        features[row, -1] = subject.age_months
    edges = tuple((j, k) for j in range(n) for k in range(j + 1, n))
    return PoseGraph(
        subject_id=subject.id,
        node_features=features,
        node_poses=tuple(kinds),
        edges=edges,
    )


def drop_pose_family(record: SubjectRecord, family: str) -> SubjectRecord:
    """Remove every pose of a family from the record; error if nothing remains."""
    if family not in POSE_FAMILIES:
        raise DataError(f"unknown pose family {family!r}; expected one of {sorted(POSE_FAMILIES)}")
    removed = POSE_FAMILIES[family]
    kept = {kind: emb for kind, emb in record.poses.items() if kind not in removed}
    if not kept:
        raise DataError(f"subject {record.id}: removing family {family!r} leaves no poses")
    return SubjectRecord(
        id=record.id,
        age_months=record.age_months,
        poses=kept,
        class_label=record.class_label,
        anthro=record.anthro,
    )


def drop_pose_family_from_graph(graph: PoseGraph, family: str) -> PoseGraph:
    """Rebuild a graph with one pose family removed."""
    if family not in POSE_FAMILIES:
        raise DataError(f"unknown pose family {family!r}; expected one of {sorted(POSE_FAMILIES)}")
    removed = POSE_FAMILIES[family]
    keep = [i for i, kind in enumerate(graph.node_poses) if kind not in removed]
    if not keep:
        raise DataError(f"subject {graph.subject_id}: removing family {family!r} leaves no poses")
    n = len(keep)
    edges = tuple((j, k) for j in range(n) for k in range(j + 1, n))
    return PoseGraph(
        subject_id=graph.subject_id,
        node_features=graph.node_features[keep].copy(),
        node_poses=tuple(graph.node_poses[i] for i in keep),
        edges=edges,
    )
