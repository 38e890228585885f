import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divseed.errors import DataError
from divseed.evaluation import ConfusionMatrix, accumulate, miou


def test_perfect_prediction_diagonal_and_miou_one():
    cm = ConfusionMatrix(n_labels=3)
    truth = np.array([[0, 1], [2, 1]])
    accumulate(cm, truth, truth)
    off_diag = cm.counts - np.diag(np.diag(cm.counts))
    assert off_diag.sum() == 0
    report = miou(cm)
    assert report.miou == pytest.approx(1.0)
    assert report.pixel_accuracy == pytest.approx(1.0)


def test_single_pixel_counts():
    cm = ConfusionMatrix(n_labels=2)
    accumulate(cm, np.array([[1]]), np.array([[0]]))
    assert cm.counts[0][1] == 1
    assert cm.total == 1


def test_accumulation_order_independent():
    rng = np.random.default_rng(0)
    preds = [rng.integers(0, 4, size=(5, 5)) for _ in range(6)]
    truths = [rng.integers(0, 4, size=(5, 5)) for _ in range(6)]
    a = ConfusionMatrix(n_labels=4)
    for p, t in zip(preds, truths):
        accumulate(a, p, t)
    b = ConfusionMatrix(n_labels=4)
    for p, t in zip(reversed(preds), reversed(truths)):
        accumulate(b, p, t)
    assert np.array_equal(a.counts, b.counts)


def test_half_half_hand_example():
    # truth half class 0, half class 1; prediction all class 0
    cm = ConfusionMatrix(n_labels=2)
    truth = np.array([0] * 10 + [1] * 10)
    pred = np.zeros(20, dtype=np.int64)
    accumulate(cm, pred, truth)
    report = miou(cm)
    assert report.per_class_iou[0] == pytest.approx(0.5)
    assert report.per_class_iou[1] == pytest.approx(0.0)
    assert report.miou == pytest.approx(0.25)


def test_absent_classes_excluded_from_mean():
    cm = ConfusionMatrix(n_labels=4)
    accumulate(cm, np.array([0, 1]), np.array([0, 1]))  # classes 2, 3 unseen
    report = miou(cm)
    assert np.isnan(report.per_class_iou[2])
    assert np.isnan(report.per_class_iou[3])
    assert report.miou == pytest.approx(1.0)


@given(st.integers(0, 2**32))
@settings(max_examples=30)
def test_miou_invariant_under_joint_permutation(seed):
    rng = np.random.default_rng(seed)
    n = 4
    pred = rng.integers(0, n, size=60)
    truth = rng.integers(0, n, size=60)
    perm = rng.permutation(n)
    a = ConfusionMatrix(n_labels=n)
    accumulate(a, pred, truth)
    b = ConfusionMatrix(n_labels=n)
    accumulate(b, perm[pred], perm[truth])
    ra, rb = miou(a), miou(b)
    assert ra.miou == pytest.approx(rb.miou)
    assert 0.0 <= ra.miou <= 1.0
    ok = [v for v in ra.per_class_iou if not np.isnan(v)]
    assert all(0.0 <= v <= 1.0 for v in ok)


def test_eval_errors():
    cm = ConfusionMatrix(n_labels=2)
    with pytest.raises(DataError):
        miou(cm)  # all-zero matrix
    with pytest.raises(DataError):
        accumulate(cm, np.array([2]), np.array([0]))  # label out of range
    with pytest.raises(DataError):
        accumulate(cm, np.array([0, 1]), np.array([0]))  # shape mismatch


def test_report_to_dict_serializable():
    import json

    cm = ConfusionMatrix(n_labels=3)
    accumulate(cm, np.array([0, 1]), np.array([0, 1]))
    report = miou(cm, config={"k": 20})
    doc = json.loads(json.dumps(report.to_dict()))
    assert doc["miou"] == 1.0
    assert doc["per_class_iou"][2] is None
    assert doc["config"] == {"k": 20}
