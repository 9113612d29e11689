"""
Tests for Evaluation Service

Covers:
- Worked cloud-mask and kappa values
- Agreement with scikit-learn and with exact rational arithmetic
- Zero-division and degenerate-kappa handling
- Report tables, metrics files and phase strips
"""

from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import (
    balanced_accuracy_score,
    cohen_kappa_score,
    confusion_matrix,
    precision_recall_fscore_support,
)

from services.evaluation_service import (
    CLASS_NAMES,
    MODEL_COLUMN,
    PER_CLASS_FILE,
    TABLE1_COLUMNS,
    TABLE1_FILE,
    TABLE2_COLUMNS,
    TABLE2_FILE,
    ConfusionMatrix,
    MetricsReport,
    binarize,
    cohen_kappa,
    evaluate,
    evaluate_classes,
    evaluate_patches,
    load_report,
    mask_metrics,
    phase_metrics,
    phase_strips,
    render_report,
    save_report,
)
from utils.containers import UNLABELED
from utils.validation import DegenerateMetricError, EmptyMaskError, ShapeError, ValidationError
from visualization.strips import read_pnm


def random_case(rng: np.random.Generator):
    """Random [B, 38, H, W] truth/prediction pair with a random pixel mask and some sentinels."""
    B, H, W = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
    truth = rng.integers(0, 4, size=(B, 38, H, W)).astype(np.uint8)
    pred = np.where(rng.random(truth.shape) < 0.6, truth, rng.integers(0, 4, size=truth.shape)).astype(np.uint8)
    truth[rng.random(truth.shape) < 0.05] = UNLABELED
    mask = rng.random((B, H, W)) < 0.5
    mask.flat[0] = True
    truth[0, 0, 0, 0] = 1
    return pred, truth, mask


def exact_kappa(counts: np.ndarray) -> Fraction:
    n = int(counts.sum())
    p_o = Fraction(int(np.trace(counts)), n)
    p_e = sum(Fraction(int(r) * int(c), n * n) for r, c in zip(counts.sum(axis=1), counts.sum(axis=0)))
    return (p_o - p_e) / (1 - p_e)


# ============================================================
# Confusion Matrix
# ============================================================

class TestConfusionMatrix:

    def test_from_labels_matches_sklearn(self, rng):
        truth = rng.integers(0, 4, 500)
        pred = rng.integers(0, 4, 500)
        cm = ConfusionMatrix.from_labels(truth, pred, 4)
        np.testing.assert_array_equal(cm.counts, confusion_matrix(truth, pred, labels=[0, 1, 2, 3]))

    def test_merge_equals_concatenation(self, rng):
        a_t, a_p, b_t, b_p = (rng.integers(0, 4, 100) for _ in range(4))
        merged = ConfusionMatrix.from_labels(a_t, a_p, 4) + ConfusionMatrix.from_labels(b_t, b_p, 4)
        whole = ConfusionMatrix.from_labels(np.concatenate([a_t, b_t]), np.concatenate([a_p, b_p]), 4)
        np.testing.assert_array_equal(merged.counts, whole.counts)

    def test_binary_collapse(self):
        cm = ConfusionMatrix(np.array([
            [5, 1, 0, 2],
            [1, 4, 1, 0],
            [0, 2, 3, 0],
            [3, 0, 0, 6],
        ]))
        assert cm.binary().to_list() == [[5, 3], [4, 16]]

    def test_rejects_out_of_range_codes(self):
        with pytest.raises(ValidationError):
            ConfusionMatrix.from_labels(np.array([0, 4]), np.array([0, 1]), 4)

    def test_rejects_size_mismatch(self):
        with pytest.raises(ShapeError):
            ConfusionMatrix.from_labels(np.array([0, 1]), np.array([0]), 4)

    def test_merge_size_mismatch(self):
        with pytest.raises(ShapeError):
            ConfusionMatrix.zeros(4).merge(ConfusionMatrix.zeros(2))

    def test_binarize(self):
        np.testing.assert_array_equal(binarize(np.array([0, 1, 2, 3])), [False, True, True, True])


# ============================================================
# Cloud-Mask Metrics
# ============================================================

class TestMaskMetrics:

    def test_worked_example(self):
        # rows truth (clear, cloud), columns prediction
        m = mask_metrics(ConfusionMatrix(np.array([[4, 1], [2, 3]])))
        assert m.precision == pytest.approx(0.75)
        assert m.recall == pytest.approx(0.6)
        assert m.f1 == pytest.approx(2 / 3)
        assert m.iou == pytest.approx(0.5)
        assert m.accuracy == pytest.approx(0.7)
        assert m.flags == []

    def test_no_predicted_cloud_flags_zero_division(self):
        m = mask_metrics(ConfusionMatrix(np.array([[0, 0], [5, 0]])))
        assert (m.precision, m.recall, m.f1, m.iou) == (0.0, 0.0, 0.0, 0.0)
        assert "precision_zero_division" in m.flags
        assert "f1_zero_division" in m.flags

    def test_needs_binary_matrix(self):
        with pytest.raises(ShapeError):
            mask_metrics(ConfusionMatrix.zeros(4))

    def test_empty_matrix(self):
        with pytest.raises(ValidationError):
            mask_metrics(ConfusionMatrix.zeros(2))


# ============================================================
# Phase Metrics
# ============================================================

class TestPhaseMetrics:

    def test_kappa_worked_example(self):
        # P_o = 0.7, P_e = 0.5
        assert cohen_kappa(ConfusionMatrix(np.array([[35, 15], [15, 35]]))) == pytest.approx(0.4)

    def test_diagonal_is_perfect(self):
        m = phase_metrics(ConfusionMatrix(np.diag([5, 3, 2, 7])))
        assert m.balanced_accuracy == 1.0
        assert m.kappa == 1.0
        assert (m.precision_macro, m.recall_macro, m.f1_macro) == (1.0, 1.0, 1.0)

    def test_single_cell_is_degenerate(self):
        counts = np.zeros((4, 4), dtype=np.int64)
        counts[1, 1] = 9
        with pytest.raises(DegenerateMetricError):
            phase_metrics(ConfusionMatrix(counts))

    def test_degenerate_kappa_substitute(self):
        counts = np.zeros((4, 4), dtype=np.int64)
        counts[1, 1] = 9
        m = phase_metrics(ConfusionMatrix(counts), degenerate_kappa=0.0)
        assert m.kappa == 0.0
        assert "kappa_degenerate" in m.flags

    def test_absent_class_skipped_from_macro(self):
        counts = np.array([
            [4, 1, 0, 0],
            [0, 3, 0, 0],
            [0, 0, 0, 0],
            [1, 0, 0, 5],
        ])
        m = phase_metrics(ConfusionMatrix(counts))
        assert m.present == [0, 1, 3]
        assert "class_absent:mixed" in m.flags
        recalls = [4 / 5, 1.0, 5 / 6]
        assert m.recall_macro == pytest.approx(np.mean(recalls))
        assert m.balanced_accuracy == pytest.approx(np.mean(recalls))

    def test_predicted_only_class_counts_in_macro_not_balanced(self):
        counts = np.array([
            [3, 0, 1, 0],
            [0, 4, 0, 0],
            [0, 0, 0, 0],
            [0, 0, 0, 2],
        ])
        m = phase_metrics(ConfusionMatrix(counts))
        assert m.balanced_accuracy == pytest.approx(np.mean([0.75, 1.0, 1.0]))
        assert m.recall_macro == pytest.approx(np.mean([0.75, 1.0, 0.0, 1.0]))

    def test_class_name_count(self):
        with pytest.raises(ShapeError):
            phase_metrics(ConfusionMatrix(np.eye(4, dtype=np.int64)), class_names=("a", "b"))

    def test_label_permutation_invariance(self, rng):
        truth = rng.integers(0, 4, 400)
        pred = np.where(rng.random(400) < 0.5, truth, rng.integers(0, 4, 400))
        perm = np.array([2, 0, 3, 1])
        a = phase_metrics(ConfusionMatrix.from_labels(truth, pred, 4))
        b = phase_metrics(ConfusionMatrix.from_labels(perm[truth], perm[pred], 4))
        for attr in ("balanced_accuracy", "kappa", "precision_macro", "recall_macro", "f1_macro"):
            assert getattr(a, attr) == pytest.approx(getattr(b, attr), abs=1e-12)


class TestOracles:
    """Random masked volumes against scikit-learn, exact fractions and per-voxel counting."""

    def test_against_sklearn_and_fractions(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            pred, truth, mask = random_case(rng)
            report = evaluate_classes(pred, truth, mask)
            valid = mask[:, None, :, :] & (truth != UNLABELED)
            t, p = truth[valid].astype(int), pred[valid].astype(int)

            np.testing.assert_array_equal(report.phase_cm.counts, confusion_matrix(t, p, labels=[0, 1, 2, 3]))

            tb, pb = t != 0, p != 0
            mp, mr, mf, _ = precision_recall_fscore_support(
                tb, pb, average="binary", pos_label=True, zero_division=0
            )
            assert report.mask.precision == pytest.approx(mp, abs=1e-12)
            assert report.mask.recall == pytest.approx(mr, abs=1e-12)
            assert report.mask.f1 == pytest.approx(mf, abs=1e-12)
            assert report.mask.accuracy == pytest.approx(np.mean(tb == pb), abs=1e-12)

            if "kappa_degenerate" in report.warnings:
                continue
            assert report.phase.kappa == pytest.approx(float(exact_kappa(report.phase_cm.counts)), abs=1e-12)
            assert report.phase.kappa == pytest.approx(cohen_kappa_score(t, p, labels=[0, 1, 2, 3]), abs=1e-12)
            assert report.phase.balanced_accuracy == pytest.approx(balanced_accuracy_score(t, p), abs=1e-12)
            labels = sorted(set(t.tolist()) | set(p.tolist()))
            pp, pr, pf, _ = precision_recall_fscore_support(t, p, labels=labels, average="macro", zero_division=0)
            assert report.phase.precision_macro == pytest.approx(pp, abs=1e-12)
            assert report.phase.recall_macro == pytest.approx(pr, abs=1e-12)
            assert report.phase.f1_macro == pytest.approx(pf, abs=1e-12)

    def test_against_voxel_loop(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            pred, truth, mask = random_case(rng)
            expected = np.zeros((4, 4), dtype=np.int64)
            for b, k, r, c in np.ndindex(truth.shape):
                if mask[b, r, c] and truth[b, k, r, c] != UNLABELED:
                    expected[truth[b, k, r, c], pred[b, k, r, c]] += 1
            report = evaluate_classes(pred, truth, mask)
            np.testing.assert_array_equal(report.phase_cm.counts, expected)
            tp = int(expected[1:, 1:].sum())
            fp = int(expected[0, 1:].sum())
            fn = int(expected[1:, 0].sum())
            if tp + fp + fn:
                assert report.mask.iou == pytest.approx(tp / (tp + fp + fn), abs=1e-12)


# ============================================================
# Evaluate
# ============================================================

class TestEvaluate:

    def test_perfect_prediction(self, rng):
        truth = rng.integers(0, 4, size=(2, 38, 4, 4)).astype(np.uint8)
        probs = np.eye(4)[truth].transpose(0, 4, 1, 2, 3)
        report = evaluate(probs, truth)
        assert all(v == 1.0 for v in report.mask.row().values())
        assert all(v == 1.0 for v in report.phase.row().values())
        assert not report.degenerate

    def test_constant_clear_on_cloudy_truth(self):
        truth = np.full((1, 38, 2, 2), 1, dtype=np.uint8)
        truth[0, :10] = 3
        pred = np.zeros_like(truth)
        report = evaluate_classes(pred, truth)
        assert (report.mask.recall, report.mask.f1, report.mask.iou) == (0.0, 0.0, 0.0)
        assert report.degenerate

    def test_mask_excludes_pixels(self, rng):
        truth = rng.integers(0, 4, size=(1, 38, 3, 3)).astype(np.uint8)
        pred = (truth + 1) % 4
        mask = np.zeros((1, 3, 3), dtype=bool)
        mask[0, 1, 1] = True
        pred[0, :, 1, 1] = truth[0, :, 1, 1]
        report = evaluate_classes(pred, truth, mask)
        assert report.num_voxels == 38
        assert report.mask.accuracy == 1.0

    def test_empty_mask(self, rng):
        truth = rng.integers(0, 4, size=(1, 38, 3, 3)).astype(np.uint8)
        with pytest.raises(EmptyMaskError):
            evaluate_classes(truth, truth, np.zeros((1, 3, 3), dtype=bool))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            evaluate_classes(np.zeros((1, 38, 3, 3)), np.zeros((1, 38, 3, 4)))

    def test_probabilities_must_be_rank5(self):
        with pytest.raises(ShapeError):
            evaluate(np.zeros((4, 38, 3, 3)), np.zeros((1, 38, 3, 3)))

    def test_patches_sparse_and_dense(self, small_patches):
        for patch in small_patches:
            patch.prediction = patch.dense.copy()
        sparse = evaluate_patches(small_patches)
        dense = evaluate_patches(small_patches, dense=True)
        assert sparse.num_voxels == sum(int(p.mask.sum()) for p in small_patches) * 38
        assert dense.num_voxels == 4 * 38 * 8 * 8
        assert sparse.phase.kappa == 1.0
        assert dense.mask.f1 == 1.0

    def test_patches_without_prediction(self, small_patches):
        with pytest.raises(ValidationError):
            evaluate_patches(small_patches)

    def test_no_patches(self):
        with pytest.raises(EmptyMaskError):
            evaluate_patches([])


# ============================================================
# Reports
# ============================================================

@pytest.fixture
def two_reports(rng):
    reports = {}
    for name in ("Sgmagnet", "Baseline"):
        truth = rng.integers(0, 4, 300)
        pred = np.where(rng.random(300) < 0.7, truth, rng.integers(0, 4, 300))
        reports[name] = MetricsReport.from_confusion(ConfusionMatrix.from_labels(truth, pred, 4))
    return reports


class TestReport:

    def test_render_tables(self, tmp_path, two_reports):
        written = render_report(two_reports, tmp_path)
        table1 = pd.read_csv(tmp_path / TABLE1_FILE)
        table2 = pd.read_csv(tmp_path / TABLE2_FILE)
        assert list(table1.columns) == [MODEL_COLUMN, *TABLE1_COLUMNS]
        assert list(table2.columns) == [MODEL_COLUMN, *TABLE2_COLUMNS]
        assert table1[MODEL_COLUMN].tolist() == ["Sgmagnet", "Baseline"]
        assert table1["F1"].iloc[0] == pytest.approx(two_reports["Sgmagnet"].mask.f1, abs=1e-6)
        per_class = pd.read_csv(tmp_path / PER_CLASS_FILE)
        assert len(per_class) == 2 * len(CLASS_NAMES)
        assert len(written["tables"]) == 3
        assert "<html>" in written["charts"][0].read_text(encoding="utf-8")

    def test_one_row_per_model(self, tmp_path, two_reports):
        render_report({"Sgmagnet": two_reports["Sgmagnet"]}, tmp_path)
        assert len(pd.read_csv(tmp_path / TABLE1_FILE)) == 1
        assert len(pd.read_csv(tmp_path / TABLE2_FILE)) == 1

    def test_no_reports(self, tmp_path):
        with pytest.raises(ValidationError):
            render_report({}, tmp_path)

    def test_strips_written(self, tmp_path, two_reports, patch_factory):
        patch = patch_factory(size=6)
        patch.prediction = patch.dense.copy()
        strips = phase_strips([patch])
        assert strips[0]["truth"].shape == (38, 6)
        written = render_report(two_reports, tmp_path, strip_sets={"Sgmagnet": strips}, strip_scale=2)
        # truth, prediction and dense, each as PPM plus PGM
        assert len(written["strips"]) == 6
        image = read_pnm(tmp_path / "Sgmagnet_strip000_truth.ppm")
        assert image.shape == (76, 12, 3)

    def test_strips_default_one_row_per_layer(self, tmp_path, two_reports, patch_factory):
        patch = patch_factory(size=7)
        patch.prediction = patch.dense.copy()
        strips = phase_strips([patch])
        track_len = strips[0]["truth"].shape[1]
        render_report(two_reports, tmp_path, strip_sets={"Sgmagnet": strips})
        assert read_pnm(tmp_path / "Sgmagnet_strip000_prediction.ppm").shape == (38, track_len, 3)
        assert read_pnm(tmp_path / "Sgmagnet_strip000_prediction_mask.pgm").shape == (38, track_len)

    def test_strips_skip_unpredicted(self, patch_factory):
        assert phase_strips([patch_factory(size=4)]) == []

    def test_save_load_round_trip(self, tmp_path, two_reports):
        path = save_report(tmp_path / "metrics.json", two_reports["Baseline"], "Baseline")
        name, loaded = load_report(path)
        assert name == "Baseline"
        assert loaded.to_dict() == two_reports["Baseline"].to_dict()

    def test_load_malformed(self, tmp_path):
        path = tmp_path / "metrics.json"
        path.write_text("{not json")
        with pytest.raises(ValidationError):
            load_report(path)
