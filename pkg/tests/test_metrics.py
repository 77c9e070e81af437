import numpy as np
import pytest

from slicedistill import metrics as mt
from slicedistill.errors import EmptyMask, ShapeMismatch, SingleClass


# independent oracles live in oracles.py (shared with the acceptance suite)
from oracles import (brute_dice, brute_hd95, mpmath_welch_p, random_blob,
                     trapezoid_auroc)


# auroc


def test_auroc_spec_example():
    assert mt.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_perfect_and_ties():
    assert mt.auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert mt.auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auroc_single_class_rejected():
    with pytest.raises(SingleClass):
        mt.auroc([0.1, 0.9], [1, 1])


def test_auroc_matches_trapezoid_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 60))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        s = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4)))  # force ties
        worst = max(worst, abs(mt.auroc(s, y) - trapezoid_auroc(s, y)))
    assert worst < 1e-9


# dice


def test_dice_spec_examples():
    assert mt.dice(np.ones(4), np.ones(4), 1) == 1.0
    assert mt.dice(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), 1) == 0.0
    assert mt.dice(np.array([1, 1, 1, 1, 0, 0]), np.array([0, 0, 1, 1, 1, 1]), 1) == 0.5
    assert mt.dice(np.zeros(4), np.zeros(4), 1) == 1.0


def test_dice_shape_guard():
    with pytest.raises(ShapeMismatch):
        mt.dice(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_dice_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(100):
        shape = tuple(rng.integers(2, 16, size=int(rng.integers(2, 4))))
        a = rng.integers(0, 3, shape)
        b = rng.integers(0, 3, shape)
        d = mt.dice(a, b, 1)
        assert 0.0 <= d <= 1.0
        assert d == mt.dice(b, a, 1)
        assert d == brute_dice(a, b, 1)


# hd95


def test_hd95_identical_masks_zero():
    rng = np.random.default_rng(2)
    m = random_blob(rng, (10, 10, 8))
    assert mt.hd95(m, m) == 0.0


def test_hd95_single_voxels_three_apart():
    a = np.zeros((9, 9), dtype=bool)
    b = np.zeros((9, 9), dtype=bool)
    a[4, 1] = True
    b[4, 4] = True
    assert mt.hd95(a, b) == 3.0
    assert mt.hd95(b, a) == 3.0


def test_hd95_empty_mask_rules():
    empty = np.zeros((5, 5), dtype=bool)
    assert mt.hd95(empty, empty) == 0.0
    full = np.ones((5, 5), dtype=bool)
    with pytest.raises(EmptyMask):
        mt.hd95(empty, full)


def test_hd95_matches_brute_force_exactly():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 40:
        nd = int(rng.integers(2, 4))
        shape = tuple(rng.integers(4, 17, size=nd))
        a, b = random_blob(rng, shape), random_blob(rng, shape)
        if not (a.any() and b.any()):
            continue
        assert mt.hd95(a, b) == brute_hd95(a, b)
        checked += 1


def test_hd95_spacing_scales_distances():
    a = np.zeros((9, 9), dtype=bool)
    b = np.zeros((9, 9), dtype=bool)
    a[4, 1] = True
    b[4, 4] = True
    assert mt.hd95(a, b, spacing=(1.0, 2.0)) == pytest.approx(6.0)
    got = mt.hd95(a, b, spacing=(0.5, 0.5))
    assert got == pytest.approx(brute_hd95(a, b, spacing=(0.5, 0.5)), abs=1e-12)


def test_boundary_definition_face_neighbors():
    m = np.zeros((5, 5), dtype=bool)
    m[1:4, 1:4] = True
    boundary = {tuple(v) for v in mt._boundary_voxels(m)}
    interior = {(2, 2)}
    all_in = {tuple(v) for v in np.argwhere(m)}
    assert boundary == all_in - interior
    # voxels on the array edge count as boundary (out-of-bounds = outside)
    edge = np.ones((3, 3), dtype=bool)
    got = {tuple(int(x) for x in v) for v in mt._boundary_voxels(edge)}
    assert got == {(i, j) for i in range(3) for j in range(3)} - {(1, 1)}


# classification metrics


def test_classification_metrics_all_correct():
    m = mt.classification_metrics([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert m == {"accuracy": 1.0, "precision": 1.0, "recall": 1.0, "f1": 1.0}


def test_classification_metrics_no_positive_predictions():
    m = mt.classification_metrics([0.1, 0.2, 0.3], [1, 0, 1])
    assert m["precision"] == 0.0 and m["recall"] == 0.0 and m["f1"] == 0.0


def test_classification_metrics_hand_confusion():
    # TP=3 FP=1 FN=2 TN=4
    y = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
    p = [0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]
    m = mt.classification_metrics(p, y)
    assert m["accuracy"] == pytest.approx(0.7)
    assert m["precision"] == pytest.approx(0.75)
    assert m["recall"] == pytest.approx(0.6)
    assert m["f1"] == pytest.approx(2 * 0.75 * 0.6 / (0.75 + 0.6))


# Welch t-test


def test_ttest_identical_samples():
    assert mt.fold_ttest([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]) == 1.0


def test_ttest_separated_samples_tiny_p():
    a = [1.0] * 5
    b = [2.0 + 1e-9, 2.0 - 1e-9, 2.0, 2.0 + 2e-9, 2.0 - 2e-9]
    assert mt.fold_ttest(a, b) < 1e-6


def test_ttest_symmetric():
    a = [0.8, 0.82, 0.85, 0.79, 0.81]
    b = [0.7, 0.75, 0.72, 0.74, 0.71]
    assert mt.fold_ttest(a, b) == mt.fold_ttest(b, a)


def test_ttest_zero_variance_rules():
    assert mt.fold_ttest([2, 2, 2], [2, 2, 2]) == 1.0
    assert mt.fold_ttest([2, 2, 2], [3, 3, 3]) == 0.0


def test_ttest_matches_high_precision_reference():
    pytest.importorskip("mpmath")
    cases = [
        ([0.88, 0.84, 0.86, 0.90, 0.83], [0.80, 0.79, 0.82, 0.78, 0.81]),
        ([0.5, 0.51, 0.49, 0.52, 0.48], [0.5, 0.52, 0.47, 0.53, 0.49]),
        ([1.0, 2.0, 3.0, 4.0, 5.0], [1.5, 2.5, 3.5, 4.5, 5.5]),
        ([0.1, 0.2, 0.15, 0.12, 0.18], [0.4, 0.38, 0.41, 0.39, 0.42]),
    ]
    for a, b in cases:
        assert mt.fold_ttest(a, b) == pytest.approx(mpmath_welch_p(a, b), abs=1e-6)


# report container


def test_metric_report_round_trip(tmp_path):
    import json
    report = mt.MetricReport.from_folds("auroc", [0.8, 0.82, 0.85, 0.79, 0.81],
                                        p_values={"vs_random": 0.01})
    assert report.mean == pytest.approx(np.mean(report.per_fold))
    assert report.std == pytest.approx(np.std(report.per_fold, ddof=1))
    report.save_json(tmp_path / "r.json")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["per_fold"] == report.per_fold
    assert doc["p_values"] == {"vs_random": 0.01}
    report.save_fold_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().strip().splitlines()
    assert lines[0] == "fold,auroc" and len(lines) == 6
