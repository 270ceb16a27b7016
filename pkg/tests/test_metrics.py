import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nutriscreen.metrics import (
    average_precision,
    calibration_metrics,
    classification_metrics,
    decision_curve,
    effect_size,
    fold_ci,
    pearson_r,
    regression_metrics,
    roc_auc,
)
from nutriscreen.records import DataError


def pair_counting_auc(probs, labels):
    """Oracle: enumerate positive-negative pairs; ties count one half."""
    pos = [p for p, y in zip(probs, labels) if y == 1]
    neg = [p for p, y in zip(probs, labels) if y == 0]
    score = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                score += 1.0
            elif p == q:
                score += 0.5
    return score / (len(pos) * len(neg))


def enumeration_average_precision(probs, labels):
    """Oracle: walk distinct thresholds descending, accumulate step areas."""
    thresholds = sorted(set(probs), reverse=True)
    n_pos = sum(labels)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        tp = sum(1 for p, y in zip(probs, labels) if p >= t and y == 1)
        fp = sum(1 for p, y in zip(probs, labels) if p >= t and y == 0)
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


class TestClassificationMetrics:
    def test_perfect_separation(self):
        probs = np.array([0.1, 0.2, 0.8, 0.9])
        labels = np.array([0, 0, 1, 1])
        report = classification_metrics(probs, labels, threshold=0.5)
        assert report.roc_auc == 1.0
        assert report.map == 1.0
        assert report.accuracy == report.precision == report.recall == report.f1 == 1.0

    def test_inverted_classifier(self):
        assert roc_auc(np.array([0.2, 0.8]), np.array([1, 0])) == 0.0

    def test_hand_confusion_example(self):
        report = classification_metrics(
            np.array([0.9, 0.4, 0.6]), np.array([1, 0, 1]), threshold=0.5
        )
        assert (report.tp, report.fp, report.fn, report.tn) == (2, 0, 0, 1)
        assert report.accuracy == 1.0
        assert report.precision == 1.0
        assert report.recall == 1.0
        assert report.f1 == 1.0
        assert report.roc_auc == 1.0

    def test_zero_predicted_positives_policy(self):
        report = classification_metrics(
            np.array([0.1, 0.2, 0.3]), np.array([0, 1, 1]), threshold=0.9
        )
        assert report.precision == 0.0
        assert not report.precision_defined
        assert report.f1 == 0.0

    def test_single_class_auc_undefined(self):
        report = classification_metrics(np.array([0.2, 0.9]), np.array([1, 1]), 0.5)
        assert report.roc_auc is None
        assert report.map is None

    def test_auc_matches_pair_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            n = int(rng.integers(5, 200))
            # quantize to force ties
            probs = np.round(rng.random(n), 1)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            got = roc_auc(probs, labels)
            want = pair_counting_auc(probs.tolist(), labels.tolist())
            assert got == pytest.approx(want, abs=1e-12)

    def test_ap_matches_enumeration_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(4, 60))
            probs = np.round(rng.random(n), 1)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            got = average_precision(probs, labels)
            want = enumeration_average_precision(probs.tolist(), labels.tolist())
            assert got == pytest.approx(want, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        probs = rng.random(40)
        labels = rng.integers(0, 2, size=40)
        labels[0], labels[1] = 0, 1
        base = classification_metrics(probs, labels, 0.5)
        perm = rng.permutation(40)
        shuffled = classification_metrics(probs[perm], labels[perm], 0.5)
        assert base == shuffled


class TestRegressionMetrics:
    def _wrap(self, errors):
        preds = np.zeros((len(errors), 4))
        preds[:, 0] = errors
        truths = np.zeros((len(errors), 4))
        masks = np.zeros((len(errors), 4), dtype=bool)
        masks[:, 0] = True
        # other targets need at least one pair to not error; give exact zeros
        preds[0, 1:] = 0.0
        masks[0, 1:] = True
        return preds, truths, masks

    def test_exact_predictions(self):
        preds, truths, masks = self._wrap([0.0, 0.0])
        report = regression_metrics(preds, truths, masks)
        assert report.rmse["height_cm"] == 0.0
        assert report.mae["height_cm"] == 0.0

    def test_symmetric_errors(self):
        preds, truths, masks = self._wrap([3.0, -3.0])
        report = regression_metrics(preds, truths, masks)
        assert report.mae["height_cm"] == pytest.approx(3.0)
        assert report.rmse["height_cm"] == pytest.approx(3.0)

    def test_mixed_errors(self):
        preds, truths, masks = self._wrap([0.0, 4.0])
        report = regression_metrics(preds, truths, masks)
        assert report.mae["height_cm"] == pytest.approx(2.0)
        assert report.rmse["height_cm"] == pytest.approx(math.sqrt(8.0), abs=1e-9)

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(3)
        preds = rng.standard_normal((30, 4))
        truths = rng.standard_normal((30, 4))
        masks = np.ones((30, 4), dtype=bool)
        report = regression_metrics(preds, truths, masks)
        for target in report.rmse:
            assert report.rmse[target] >= report.mae[target] >= 0.0

    def test_fully_masked_target_errors(self):
        preds = np.zeros((3, 4))
        truths = np.zeros((3, 4))
        masks = np.ones((3, 4), dtype=bool)
        masks[:, 2] = False
        with pytest.raises(DataError, match="muac_cm"):
            regression_metrics(preds, truths, masks)


class TestCalibration:
    def test_perfect_confidence(self):
        out = calibration_metrics(np.ones(5), np.ones(5, dtype=int), n_bins=10)
        assert out == {"ece": 0.0, "mce": 0.0, "brier": 0.0}

    def test_hand_single_bin(self):
        out = calibration_metrics(np.array([0.8, 0.8]), np.array([1, 0]), n_bins=1)
        assert out["ece"] == pytest.approx(0.3, abs=1e-12)
        assert out["mce"] == pytest.approx(0.3, abs=1e-12)
        assert out["brier"] == pytest.approx(0.34, abs=1e-12)

    def test_ece_no_greater_than_mce(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(2, 100))
            probs = rng.random(n)
            labels = rng.integers(0, 2, size=n)
            out = calibration_metrics(probs, labels, n_bins=10)
            assert out["ece"] <= out["mce"] + 1e-12
            assert 0.0 <= out["brier"] <= 1.0

    def test_empty_input(self):
        with pytest.raises(DataError, match="empty"):
            calibration_metrics(np.array([]), np.array([]))


class TestDecisionCurve:
    def test_perfect_classifier_net_benefit_is_prevalence(self):
        probs = np.array([0.9, 0.9, 0.1, 0.1, 0.1])
        labels = np.array([1, 1, 0, 0, 0])
        out = decision_curve(probs, labels, [0.2, 0.5, 0.8])
        for row in out["curve"]:
            assert row["net_benefit"] == pytest.approx(0.4)

    def test_hand_value(self):
        out = decision_curve(
            np.array([0.9, 0.9, 0.1, 0.1]), np.array([1, 0, 1, 0]), [0.5]
        )
        assert out["curve"][0]["net_benefit"] == pytest.approx(0.0, abs=1e-12)

    def test_treat_all_crosses_zero_at_prevalence(self):
        probs = np.array([0.9, 0.2, 0.3, 0.8])
        labels = np.array([1, 0, 0, 1])
        prevalence = 0.5
        out = decision_curve(probs, labels, [prevalence])
        assert out["curve"][0]["treat_all"] == pytest.approx(0.0, abs=1e-12)

    def test_low_threshold_approaches_tp_rate(self):
        probs = np.array([0.9, 0.2, 0.3, 0.8])
        labels = np.array([1, 0, 1, 1])
        out = decision_curve(probs, labels, [1e-6])
        assert out["curve"][0]["net_benefit"] == pytest.approx(0.75, abs=1e-5)

    def test_tau_one_rejected(self):
        with pytest.raises(DataError):
            decision_curve(np.array([0.5]), np.array([1]), [1.0])


class TestFoldCi:
    def test_equal_values_zero_width(self):
        out = fold_ci([0.7, 0.7, 0.7, 0.7])
        assert out["half_width"] == 0.0

    def test_hand_value_four_folds(self):
        # t(df=3) = 3.1824; s = 0.05; n = 4
        values = [0.69, 0.79, 0.74, 0.74]
        s = float(np.std(values, ddof=1))
        out = fold_ci(values)
        assert s == pytest.approx(0.0408248, abs=1e-6)
        assert out["half_width"] == pytest.approx(3.1824 * s / 2.0, abs=1e-12)

    def test_spec_reference_half_width(self):
        # mean .74, s .05, n 4 -> 3.1824 * .05 / 2
        expected = 3.1824 * 0.05 / 2.0
        assert expected == pytest.approx(0.0796, abs=5e-4)

    def test_two_fold_extreme(self):
        out = fold_ci([0.0, 1.0])
        assert out["mean"] == 0.5
        assert out["std"] == pytest.approx(math.sqrt(0.5), abs=1e-12)
        assert out["half_width"] == pytest.approx(12.7062 * math.sqrt(0.5) / math.sqrt(2.0), abs=1e-9)
        assert out["half_width"] == pytest.approx(6.3531, abs=1e-4)

    def test_half_width_shrinks_with_n(self):
        widths = []
        for n in (2, 4, 8, 16):
            values = [0.5 - 0.05, 0.5 + 0.05] * (n // 2)
            widths.append(fold_ci(values)["half_width"])
        assert all(a > b for a, b in zip(widths, widths[1:]))

    def test_needs_two(self):
        with pytest.raises(DataError):
            fold_ci([0.5])

    def test_only_95(self):
        with pytest.raises(DataError):
            fold_ci([0.5, 0.6], confidence=0.9)


class TestEffectSize:
    def test_identical_vectors(self):
        out = effect_size([0.7, 0.8, 0.9], [0.7, 0.8, 0.9])
        assert out["delta"] == 0.0
        assert out["cohens_d"] == 0.0
        assert not out["infinite"]

    def test_hand_value(self):
        out = effect_size([2.0, 4.0], [1.0, 1.0])
        assert out["delta"] == pytest.approx(2.0)
        assert out["cohens_d"] == pytest.approx(2.0 / math.sqrt(2.0), abs=1e-12)

    def test_constant_nonzero_diff_flagged_infinite(self):
        out = effect_size([2.0, 3.0], [1.0, 2.0])
        assert out["delta"] == 1.0
        assert out["infinite"]
        assert math.isinf(out["cohens_d"])


class TestPearson:
    def test_perfect_linear(self):
        x = np.arange(10.0)
        assert pearson_r(x, 2 * x + 1) == pytest.approx(1.0)

    def test_perfect_inverse(self):
        x = np.arange(10.0)
        assert pearson_r(x, -x) == pytest.approx(-1.0)

    def test_hand_value(self):
        assert pearson_r([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(DataError):
            pearson_r([1, 1, 1], [1, 2, 3])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(20)
        y = rng.standard_normal(20)
        assert -1.0 - 1e-12 <= pearson_r(x, y) <= 1.0 + 1e-12
