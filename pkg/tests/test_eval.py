"""Confusion accounting and metric formulas against brute-force recounts."""

from fractions import Fraction

import numpy as np
import pytest

from palmsiam.data import Dataset, Sample
from palmsiam.evaluation import (
    CSV_HEADER,
    ConfusionCounts,
    classify,
    confusion,
    evaluate,
    metrics,
    metrics_csv,
    threshold_sweep,
)
from palmsiam.model import init_params


def brute_force_counts(preds, labels):
    tp = tn = fp = fn = 0
    for p, y in zip(preds, labels):
        if p and y:
            tp += 1
        elif p and not y:
            fp += 1
        elif not p and y:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def test_worked_confusion_example():
    counts = ConfusionCounts(tp=9, fp=1, fn=2, tn=8)
    report = metrics(counts, threshold=0.5)
    assert report.accuracy == pytest.approx(17 / 20)
    assert report.recall == pytest.approx(9 / 11)
    assert report.precision == pytest.approx(9 / 10)
    assert report.specificity == pytest.approx(8 / 9)
    assert report.f1 == pytest.approx(18 / 21)
    assert not report.degenerate


def test_metrics_match_exact_rational_formulas_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = int(rng.integers(1, 40))
        preds = rng.integers(0, 2, m).astype(bool)
        labels = rng.integers(0, 2, m).astype(bool)
        counts = confusion(preds, labels)
        tp, tn, fp, fn = brute_force_counts(preds, labels)
        assert (counts.tp, counts.tn, counts.fp, counts.fn) == (tp, tn, fp, fn)
        report = metrics(counts)
        checks = [
            (report.accuracy, Fraction(tp + tn, m)),
            (report.recall, Fraction(tp, tp + fn) if tp + fn else Fraction(0)),
            (report.precision, Fraction(tp, tp + fp) if tp + fp else Fraction(0)),
            (report.specificity, Fraction(tn, tn + fp) if tn + fp else Fraction(0)),
            (report.f1, Fraction(2 * tp, 2 * tp + fp + fn) if tp + fp + fn else Fraction(0)),
        ]
        for got, want in checks:
            assert abs(got - float(want)) < 1e-12


def test_degenerate_denominators_flag_not_crash():
    all_negative_truth = metrics(ConfusionCounts(tp=0, tn=5, fp=0, fn=0))
    assert all_negative_truth.degenerate
    assert all_negative_truth.recall == 0.0  # no positives to recall
    assert all_negative_truth.accuracy == 1.0
    all_positive_truth = metrics(ConfusionCounts(tp=3, tn=0, fp=0, fn=2))
    assert all_positive_truth.degenerate  # no negatives: specificity is 0/0
    assert all_positive_truth.specificity == 0.0
    assert all_positive_truth.recall == pytest.approx(0.6)
    with pytest.raises(ValueError, match="empty confusion"):
        metrics(ConfusionCounts(0, 0, 0, 0))
    with pytest.raises(ValueError, match="tp must be nonnegative"):
        ConfusionCounts(tp=-1, tn=0, fp=0, fn=1)


def test_classify_boundary_is_genuine():
    assert classify(0.5, threshold=0.5)
    assert not classify(0.49999, threshold=0.5)
    with pytest.raises(ValueError, match="threshold"):
        classify(0.5, threshold=0.0)


def test_confusion_shape_guard():
    with pytest.raises(ValueError, match="mismatch"):
        confusion([True, False], [True])
    with pytest.raises(ValueError, match="mismatch"):
        confusion([[True]], [[True]])


def test_csv_row_format_three_decimals():
    report = metrics(
        ConfusionCounts(tp=9, fp=1, fn=2, tn=8), threshold=0.25, n=5, loss="contrastive"
    )
    assert report.csv_row() == "contrastive,2,5,0.250,0.850,0.818,0.900,0.889,0.857"
    text = metrics_csv([report])
    assert text.startswith(CSV_HEADER + "\n")
    assert text.endswith("\n")


def _tiny_dataset(n_subjects=6, samples_each=3, seed=0):
    rng = np.random.default_rng(seed)
    subjects = {}
    for i in range(n_subjects):
        sid = f"s{i:03d}"
        subjects[sid] = [
            Sample(
                subject_id=sid,
                session_id=j,
                left_image=rng.random((128, 128), dtype=np.float32),
                right_image=rng.random((128, 128), dtype=np.float32),
            )
            for j in range(samples_each)
        ]
    return Dataset(subjects)


@pytest.fixture(scope="module")
def untrained_setup():
    return init_params(seed=0), _tiny_dataset()


def test_evaluate_is_deterministic(untrained_setup):
    params, ds = untrained_setup
    r1 = evaluate(params, ds, pairs_per_class=25, threshold=0.5, seed=3)
    r2 = evaluate(params, ds, pairs_per_class=25, threshold=0.5, seed=3)
    assert r1 == r2
    assert r1.counts.total == 50


def test_evaluate_validates_threshold(untrained_setup):
    params, ds = untrained_setup
    with pytest.raises(ValueError, match="threshold"):
        evaluate(params, ds, pairs_per_class=5, threshold=1.0)


def test_sweep_monotonicity_and_consistency(untrained_setup):
    params, ds = untrained_setup
    grid = [0.1, 0.3, 0.5, 0.7, 0.9]
    reports = threshold_sweep(params, ds, grid, pairs_per_class=25, seed=3)
    assert [r.threshold for r in reports] == grid
    # raising the threshold can only shrink the predicted-genuine set
    pred_genuine = [r.counts.tp + r.counts.fp for r in reports]
    assert pred_genuine == sorted(pred_genuine, reverse=True)
    # recall never rises with threshold; specificity never falls
    recalls = [r.recall for r in reports]
    assert all(a >= b - 1e-12 for a, b in zip(recalls, recalls[1:]))
    specs = [r.specificity for r in reports]
    assert all(a <= b + 1e-12 for a, b in zip(specs, specs[1:]))
    # a sweep row must agree with a standalone evaluation at that threshold
    solo = evaluate(params, ds, pairs_per_class=25, threshold=0.5, seed=3)
    by_threshold = {r.threshold: r for r in reports}
    assert by_threshold[0.5].counts == solo.counts


def test_sweep_validates_grid(untrained_setup):
    params, ds = untrained_setup
    with pytest.raises(ValueError, match="empty threshold grid"):
        threshold_sweep(params, ds, [], pairs_per_class=5)
    with pytest.raises(ValueError, match="threshold must be in"):
        threshold_sweep(params, ds, [0.5, 1.5], pairs_per_class=5)
