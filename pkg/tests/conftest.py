import numpy as np
import pytest

from nutriscreen.records import (
    EMBEDDING_DIM,
    AnthroLabels,
    PoseKind,
    SubjectRecord,
    SyntheticConfig,
    generate_synthetic_cohort,
)


def make_record(
    subject_id="s1",
    age=60.0,
    n_poses=8,
    label=0,
    anthro=True,
    seed=0,
    embedding_dim=EMBEDDING_DIM,
):
    rng = np.random.default_rng(seed)
    kinds = list(PoseKind)[:n_poses]
    poses = {kind: rng.standard_normal(embedding_dim) for kind in kinds}
    labels = (
        AnthroLabels(height_cm=100.0, weight_kg=15.0, muac_cm=13.0, hc_cm=48.0)
        if anthro
        else None
    )
    return SubjectRecord(
        id=subject_id, age_months=age, poses=poses, class_label=label, anthro=labels
    )


@pytest.fixture(scope="session")
def small_cohort():
    """60 deterministic synthetic subjects, enough for quick training runs."""
    config = SyntheticConfig(
        n_subjects=60,
        positive_fraction=0.35,
        cluster_separation=3.0,
        poses_per_subject=8,
        seed=7,
    )
    return generate_synthetic_cohort(config)


@pytest.fixture(scope="session")
def small_kb_cohort():
    config = SyntheticConfig(
        n_subjects=40,
        positive_fraction=0.35,
        cluster_separation=3.0,
        poses_per_subject=8,
        seed=8,
    )
    return generate_synthetic_cohort(config)
