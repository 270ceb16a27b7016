"""Subject records, dataset I/O, target standardization, synthetic cohorts.

A subject is a child described by an age in months, one embedding vector per
photographed pose (eight views at most), an optional binary nutrition label
(0 healthy, 1 malnourished) and optional anthropometric ground truth.
Embeddings are produced by an external image encoder; this package never
touches images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

EMBEDDING_DIM = 1024
NODE_DIM = EMBEDDING_DIM + 1  # embedding with the age appended

ANTHRO_TARGETS = ("height_cm", "weight_kg", "muac_cm", "hc_cm")


class DataError(ValueError):
    """Raised for malformed or inconsistent subject data."""


class PoseKind(str, Enum):
    """The eight capture views, in canonical serialization order."""

    FRONTAL_1 = "frontal_1"
    FRONTAL_2 = "frontal_2"
    FRONTAL_3 = "frontal_3"
    FRONTAL_4 = "frontal_4"
    LATERAL_LEFT = "lateral_left"
    LATERAL_RIGHT = "lateral_right"
    POSTERIOR = "posterior"
    SELFIE = "selfie"


POSE_ORDER: tuple[PoseKind, ...] = tuple(PoseKind)
POSE_INDEX = {kind: i for i, kind in enumerate(POSE_ORDER)}


@dataclass(frozen=True)
class AnthroLabels:
    """Ground-truth measurements; any subset of the four targets may be present."""

    height_cm: Optional[float] = None
    weight_kg: Optional[float] = None
    muac_cm: Optional[float] = None
    hc_cm: Optional[float] = None

    def as_dict(self) -> dict[str, Optional[float]]:
        return {t: getattr(self, t) for t in ANTHRO_TARGETS}

    def present_targets(self) -> tuple[str, ...]:
        return tuple(t for t in ANTHRO_TARGETS if getattr(self, t) is not None)

    def validate(self) -> None:
        present = 0
        for target in ANTHRO_TARGETS:
            value = getattr(self, target)
            if value is None:
                continue
            present += 1
            if not math.isfinite(value):
                raise DataError(f"non-finite value for {target}")
            if value < 0:
                raise DataError(f"negative value for {target}")
        if present == 0:
            raise DataError("anthro container present but carries no values")


@dataclass(frozen=True)
class SubjectRecord:
    """One child: id, age, per-pose embeddings, optional labels."""

    id: str
    age_months: float
    poses: dict[PoseKind, np.ndarray]
    class_label: Optional[int] = None
    anthro: Optional[AnthroLabels] = None

    def validate(self) -> None:
        if not self.id:
            raise DataError("empty subject id")
        if not math.isfinite(self.age_months) or self.age_months <= 0:
            raise DataError(f"subject {self.id}: age_months must be positive")
        if not 1 <= len(self.poses) <= len(POSE_ORDER):
            raise DataError(f"subject {self.id}: needs between 1 and 8 poses")
        for kind, emb in self.poses.items():
            if emb.shape != (EMBEDDING_DIM,):
                raise DataError(
                    f"subject {self.id}: pose {kind.value} has dimension "
                    f"{emb.shape[0] if emb.ndim == 1 else emb.shape}, expected {EMBEDDING_DIM}"
                )
            if not np.all(np.isfinite(emb)):
                raise DataError(f"subject {self.id}: non-finite embedding for {kind.value}")
        if self.class_label is not None and self.class_label not in (0, 1):
            raise DataError(f"subject {self.id}: class_label must be 0 or 1")
        if self.anthro is not None:
            self.anthro.validate()

    def ordered_poses(self) -> list[PoseKind]:
        """Present poses in canonical order; fixes node ordering everywhere."""
        return [kind for kind in POSE_ORDER if kind in self.poses]

    def has_any_label(self) -> bool:
        return self.class_label is not None or self.anthro is not None


@dataclass(frozen=True)
class TargetStats:
    """Per-target mean and sample standard deviation from a training fold."""

    means: dict[str, float]
    stds: dict[str, float]

    def validate(self) -> None:
        for target in ANTHRO_TARGETS:
            if target not in self.means or target not in self.stds:
                raise DataError(f"missing statistics for target {target}")
            if self.stds[target] <= 0:
                raise DataError(f"non-positive std for target {target}")


def compute_target_stats(records: Iterable[SubjectRecord]) -> TargetStats:
    """Mean/std per anthropometric target over present values (sample std, n-1)."""
    values: dict[str, list[float]] = {t: [] for t in ANTHRO_TARGETS}
    for record in records:
        if record.anthro is None:
            continue
        for target in ANTHRO_TARGETS:
            value = getattr(record.anthro, target)
            if value is not None:
                values[target].append(value)
    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    for target, obs in values.items():
        if len(obs) == 0:
            raise DataError(f"no values for target {target}")
        if len(obs) < 2:
            raise DataError(f"fewer than 2 values for target {target}")
        arr = np.asarray(obs, dtype=np.float64)
        std = float(arr.std(ddof=1))
        if std == 0.0:
            raise DataError(f"zero variance for target {target}")
        means[target] = float(arr.mean())
        stds[target] = std
    return TargetStats(means=means, stds=stds)


def standardize(value: float, target: str, stats: TargetStats) -> float:
    if target not in stats.means:
        raise DataError(f"unknown target {target}")
    return (value - stats.means[target]) / stats.stds[target]


def destandardize(value: float, target: str, stats: TargetStats) -> float:
    if target not in stats.means:
        raise DataError(f"unknown target {target}")
    return value * stats.stds[target] + stats.means[target]


# ---------------------------------------------------------------------------
# JSON Lines dataset format


def _record_to_json_dict(record: SubjectRecord) -> dict:
    anthro = record.anthro.as_dict() if record.anthro is not None else None
    return {
        "id": record.id,
        "age_months": record.age_months,
        "poses": {kind.value: record.poses[kind].tolist() for kind in record.ordered_poses()},
        "class_label": record.class_label,
        "anthro": anthro,
    }


def _record_from_json_dict(obj: dict, line_no: int) -> SubjectRecord:
    if not isinstance(obj, dict):
        raise DataError(f"line {line_no}: expected a JSON object")
    try:
        subject_id = obj["id"]
        age = obj["age_months"]
        poses_json = obj["poses"]
    except KeyError as exc:
        raise DataError(f"line {line_no}: missing field {exc.args[0]}") from None
    if not isinstance(subject_id, str) or not subject_id:
        raise DataError(f"line {line_no}: id must be a nonempty string")
    if not isinstance(poses_json, dict) or not poses_json:
        raise DataError(f"line {line_no}: poses must be a nonempty object")
    poses: dict[PoseKind, np.ndarray] = {}
    for key, vec in poses_json.items():
        try:
            kind = PoseKind(key)
        except ValueError:
            raise DataError(f"line {line_no}: unknown pose kind {key!r}") from None
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (EMBEDDING_DIM,):
            raise DataError(f"dimension mismatch at line {line_no}: pose {key} has {arr.size} entries")
        if not np.all(np.isfinite(arr)):
            raise DataError(f"line {line_no}: non-finite value in pose {key}")
        poses[kind] = arr
    label = obj.get("class_label")
    anthro_json = obj.get("anthro")
    anthro = None
    if anthro_json is not None:
        unknown = set(anthro_json) - set(ANTHRO_TARGETS)
        if unknown:
            raise DataError(f"line {line_no}: unknown anthro fields {sorted(unknown)}")
        anthro = AnthroLabels(**{t: anthro_json.get(t) for t in ANTHRO_TARGETS})
    record = SubjectRecord(
        id=subject_id,
        age_months=float(age),
        poses=poses,
        class_label=label,
        anthro=anthro,
    )
    try:
        record.validate()
    except DataError as exc:
        raise DataError(f"line {line_no}: {exc}") from None
    return record


def load_dataset(path: str | Path) -> list[SubjectRecord]:
    """Read a JSON-Lines subject file; order preserved, every record validated."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    records: list[SubjectRecord] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            record = _record_from_json_dict(obj, line_no)
            if record.id in seen_ids:
                raise DataError(f"line {line_no}: duplicate id {record.id!r}")
            seen_ids.add(record.id)
            records.append(record)
    return records


def save_dataset(records: Iterable[SubjectRecord], path: str | Path) -> None:
    """Write JSON Lines; float serialization round-trips exactly."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(_record_to_json_dict(record)))
            handle.write("\n")


# ---------------------------------------------------------------------------
# Synthetic cohort generation

# The private clinical corpora are replaced by a synthetic cohort: a latent
# binary class displaces embeddings along one fixed direction, measurements
# are affine in the class. Noise scales are fixed so that both the graph
# model and cosine retrieval have signal to find.
#
# The class direction is drawn once from a constant seed: every generated
# cohort samples children from the same underlying population, so cohorts
# with different seeds can serve as train / knowledge-base / deployment
# splits of one world.
_DIRECTION_SEED = 20240917
_AMBIENT_NOISE = 0.05
_POSE_NOISE = 0.02
_AGE_RANGE = (24.0, 48.0)

# target = intercept + slope * class + noise_scale * N(0, 1)
_ANTHRO_MAP = {
    "height_cm": (95.0, -10.0, 2.5),
    "weight_kg": (14.5, -3.5, 0.9),
    "muac_cm": (15.5, -2.8, 0.5),
    "hc_cm": (48.5, -1.8, 0.6),
}


@dataclass(frozen=True)
class SyntheticConfig:
    n_subjects: int
    positive_fraction: float
    cluster_separation: float
    poses_per_subject: int
    seed: int

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise DataError("n_subjects must be at least 2")
        if not 0.0 < self.positive_fraction < 1.0:
            raise DataError("positive_fraction must lie in (0, 1)")
        if self.n_subjects * self.positive_fraction < 1.0:
            raise DataError("expected positive count below 1; raise n_subjects or positive_fraction")
        if self.n_subjects * (1.0 - self.positive_fraction) < 1.0:
            raise DataError("expected negative count below 1")
        if self.cluster_separation < 0:
            raise DataError("cluster_separation must be nonnegative")
        if not 1 <= self.poses_per_subject <= len(POSE_ORDER):
            raise DataError("poses_per_subject must lie in 1..8")


def generate_synthetic_cohort(config: SyntheticConfig) -> list[SubjectRecord]:
    """Deterministic synthetic cohort; same seed gives bit-identical records."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    direction = np.random.default_rng(_DIRECTION_SEED).standard_normal(EMBEDDING_DIM)
    direction /= np.linalg.norm(direction)

    kinds = POSE_ORDER[: config.poses_per_subject]
    width = len(str(max(config.n_subjects - 1, 1)))
    records: list[SubjectRecord] = []
    for i in range(config.n_subjects):
        label = int(rng.random() < config.positive_fraction)
        age = float(rng.uniform(*_AGE_RANGE))
        base = config.cluster_separation * label * direction
        base = base + _AMBIENT_NOISE * rng.standard_normal(EMBEDDING_DIM)
        poses = {
            kind: base + _POSE_NOISE * rng.standard_normal(EMBEDDING_DIM) for kind in kinds
        }
        anthro_values = {}
        for target, (intercept, slope, noise) in _ANTHRO_MAP.items():
            anthro_values[target] = float(intercept + slope * label + noise * rng.standard_normal())
        records.append(
            SubjectRecord(
                id=f"synth-{i:0{width}d}",
                age_months=age,
                poses=poses,
                class_label=label,
                anthro=AnthroLabels(**anthro_values),
            )
        )
    return records


def shift_cohort(
    records: list[SubjectRecord], magnitude: float, seed: int
) -> list[SubjectRecord]:
    """Offset every pose embedding along one random direction.

    Models a capture-domain shift between the training population and a new
    deployment site; ages and labels are untouched.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(EMBEDDING_DIM)
    direction /= np.linalg.norm(direction)
    offset = magnitude * direction
    shifted = []
    for record in records:
        shifted.append(
            SubjectRecord(
                id=record.id,
                age_months=record.age_months,
                poses={kind: emb + offset for kind, emb in record.poses.items()},
                class_label=record.class_label,
                anthro=record.anthro,
            )
        )
    return shifted
