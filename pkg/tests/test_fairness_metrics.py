import numpy as np
import numpy.testing as npt
import pytest
from sklearn.metrics import confusion_matrix

from modules.fairness_metrics import (
    GroupedPredictions,
    dp,
    eop,
    group_accuracies,
    max_acc_disparity,
    metrics_summary,
    overall_accuracy,
    per_class_error,
    worst_group_accuracy,
)
from utils.errors import InvalidArgumentError


def _grouped(y_true, y_pred, groups, **kwargs):
    return GroupedPredictions(np.asarray(y_true), np.asarray(y_pred), np.asarray(groups), **kwargs)


def test_perfect_predictions():
    gp = _grouped([0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 1, 1])
    assert overall_accuracy(gp) == 1.0
    assert worst_group_accuracy(gp) == 1.0
    assert max_acc_disparity(gp) == 0.0


def test_group_accuracy_of_three_in_four():
    gp = _grouped([1, 1, 0, 0, 1], [1, 1, 0, 1, 1], [0, 0, 0, 0, 1])
    assert group_accuracies(gp) == {0: 0.75, 1: 1.0}
    assert worst_group_accuracy(gp) == 0.75


def test_worst_group_and_disparity():
    # group accuracies 0.9, 0.6 and 0.8
    y_true = np.zeros(30, dtype=int)
    y_pred = np.zeros(30, dtype=int)
    groups = np.repeat([0, 1, 2], 10)
    y_pred[[0]] = 1
    y_pred[[10, 11, 12, 13]] = 1
    y_pred[[20, 21]] = 1
    gp = _grouped(y_true, y_pred, groups)
    npt.assert_allclose(list(group_accuracies(gp).values()), [0.9, 0.6, 0.8])
    assert worst_group_accuracy(gp) == pytest.approx(0.6)
    assert max_acc_disparity(gp) == pytest.approx(0.3)


def test_single_group_has_no_disparity():
    gp = _grouped([0, 1, 1], [1, 1, 0], [0, 0, 0])
    assert max_acc_disparity(gp) == 0.0
    assert eop(gp) == 0.0
    assert dp(gp) == 0.0


def test_demographic_parity_gap():
    # positive prediction rates 0.2 and 0.7
    y_pred = np.array([1, 1] + [0] * 8 + [1] * 7 + [0] * 3)
    groups = np.repeat([0, 1], 10)
    gp = _grouped(np.zeros(20, dtype=int), y_pred, groups)
    assert dp(gp) == pytest.approx(0.5)


def test_equal_true_positive_rates_give_zero_eop():
    y_true = np.array([1, 1, 0, 0, 1, 1, 0, 0])
    y_pred = np.array([1, 0, 0, 1, 1, 0, 1, 1])
    groups = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    assert eop(_grouped(y_true, y_pred, groups)) == 0.0


def test_groups_without_positives_are_left_out_of_eop(caplog):
    gp = _grouped([0, 0, 1, 1], [1, 0, 1, 0], [0, 0, 1, 1])
    with caplog.at_level("WARNING"):
        assert eop(gp) == 0.0
    assert "no positive instances" in caplog.text


def test_requested_empty_group_is_skipped(caplog):
    gp = _grouped([0, 1], [0, 1], [0, 0])
    with caplog.at_level("WARNING"):
        assert group_accuracies(gp, groups=[0, 1]) == {0: 1.0}
    assert "no instances" in caplog.text


@pytest.mark.parametrize("seed", range(5))
def test_rates_match_confusion_matrices(seed):
    rng = np.random.default_rng(seed)
    y_true = rng.integers(0, 2, 200)
    y_pred = rng.integers(0, 2, 200)
    groups = rng.integers(0, 3, 200)
    gp = _grouped(y_true, y_pred, groups)

    tprs, positive_rates, accuracies = [], [], []
    for g in range(3):
        mask = groups == g
        tn, fp, fn, tp = confusion_matrix(y_true[mask], y_pred[mask], labels=[0, 1]).ravel()
        tprs.append(tp / (tp + fn))
        positive_rates.append((tp + fp) / mask.sum())
        accuracies.append((tp + tn) / mask.sum())

    assert eop(gp) == pytest.approx(max(tprs) - min(tprs))
    assert dp(gp) == pytest.approx(max(positive_rates) - min(positive_rates))
    npt.assert_allclose(list(group_accuracies(gp).values()), accuracies)
    assert worst_group_accuracy(gp) <= overall_accuracy(gp) <= max(accuracies)


def test_metrics_do_not_depend_on_group_numbering():
    rng = np.random.default_rng(3)
    y_true, y_pred, groups = rng.integers(0, 2, 100), rng.integers(0, 2, 100), rng.integers(0, 3, 100)
    relabeled = np.array([2, 0, 1])[groups]
    a, b = _grouped(y_true, y_pred, groups), _grouped(y_true, y_pred, relabeled)
    for metric in (worst_group_accuracy, max_acc_disparity, eop, dp):
        assert metric(a) == pytest.approx(metric(b))


def test_per_class_error():
    errors = per_class_error(np.array([0, 0, 1, 1, 1]), np.array([0, 1, 1, 1, 0]), 3)
    assert errors == pytest.approx({0: 0.5, 1: 1 / 3})


def test_summary_uses_group_names():
    gp = _grouped([0, 1, 1, 0], [0, 1, 0, 0], [0, 0, 1, 1], group_names=("minority", "majority"))
    summary = metrics_summary(gp, n_classes=2)
    assert summary["group_accuracies"] == {"minority": 1.0, "majority": 0.5}
    assert summary["group_sizes"] == {"minority": 2, "majority": 2}
    assert summary["worst_group_accuracy"] == 0.5
    assert summary["worst_class_error"] == 0.5
    assert summary["positive_label"] == 1


def test_mismatched_lengths_are_rejected():
    with pytest.raises(InvalidArgumentError):
        _grouped([0, 1], [0], [0, 0])
    with pytest.raises(InvalidArgumentError):
        overall_accuracy(_grouped([], [], []))
