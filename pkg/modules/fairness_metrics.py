"""
Fairness Metrics Module
Group accuracies, worst-group accuracy, accuracy disparity, EOp and DP
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GroupedPredictions:
    """True and predicted labels with a group id per instance"""
    y_true: np.ndarray
    y_pred: np.ndarray
    groups: np.ndarray
    positive_label: int = 1
    group_names: Sequence[str] = ()

    def __post_init__(self):
        y_true, y_pred, groups = (np.asarray(a) for a in (self.y_true, self.y_pred, self.groups))
        if not (y_true.shape == y_pred.shape == groups.shape) or y_true.ndim != 1:
            raise InvalidArgumentError("y_true, y_pred and groups must be vectors of equal length")
        object.__setattr__(self, "y_true", y_true)
        object.__setattr__(self, "y_pred", y_pred)
        object.__setattr__(self, "groups", groups)

    def group_ids(self) -> List[Any]:
        return list(np.unique(self.groups))

    def name(self, group: Any) -> str:
        if self.group_names and isinstance(group, (int, np.integer)) and group < len(self.group_names):
            return str(self.group_names[group])
        return str(group)


def overall_accuracy(gp: GroupedPredictions) -> float:
    if gp.y_true.size == 0:
        raise InvalidArgumentError("No predictions to score")
    return float(np.mean(gp.y_true == gp.y_pred))


def group_accuracies(gp: GroupedPredictions, groups: Optional[Sequence[Any]] = None) -> Dict[Any, float]:
    """
    Accuracy of each group

    Args:
        gp: Grouped predictions
        groups: Groups to report; requested groups with no instances are skipped with a warning

    Returns:
        Mapping of group id to accuracy, ordered by group id
    """
    requested = gp.group_ids() if groups is None else list(groups)
    accuracies = {}
    for group in requested:
        mask = gp.groups == group
        if not mask.any():
            logger.warning(f"Group {gp.name(group)} has no instances; excluded from metrics")
            continue
        accuracies[group] = float(np.mean(gp.y_true[mask] == gp.y_pred[mask]))
    return accuracies


def worst_group_accuracy(gp: GroupedPredictions) -> float:
    accuracies = group_accuracies(gp)
    if not accuracies:
        raise InvalidArgumentError("Worst-group accuracy needs at least one group")
    return min(accuracies.values())


def _max_gap(values: Sequence[float]) -> float:
    return float(max(values) - min(values)) if len(values) >= 2 else 0.0


def max_acc_disparity(gp: GroupedPredictions) -> float:
    """Largest pairwise gap between group accuracies"""
    accuracies = group_accuracies(gp)
    if not accuracies:
        raise InvalidArgumentError("Accuracy disparity needs at least one group")
    return _max_gap(list(accuracies.values()))


def true_positive_rates(gp: GroupedPredictions) -> Dict[Any, float]:
    """TPR per group; groups without positive ground truth are skipped"""
    rates = {}
    for group in gp.group_ids():
        positives = (gp.groups == group) & (gp.y_true == gp.positive_label)
        if not positives.any():
            logger.warning(f"Group {gp.name(group)} has no positive instances; excluded from EOp")
            continue
        rates[group] = float(np.mean(gp.y_pred[positives] == gp.positive_label))
    return rates


def positive_rates(gp: GroupedPredictions) -> Dict[Any, float]:
    """P(prediction = positive | group)"""
    return {
        group: float(np.mean(gp.y_pred[gp.groups == group] == gp.positive_label))
        for group in gp.group_ids()
    }


def eop(gp: GroupedPredictions) -> float:
    """Equality of opportunity gap: max pairwise TPR difference"""
    return _max_gap(list(true_positive_rates(gp).values()))


def dp(gp: GroupedPredictions) -> float:
    """Demographic parity gap: max pairwise positive-prediction-rate difference"""
    return _max_gap(list(positive_rates(gp).values()))


def per_class_error(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> Dict[int, float]:
    """Error rate within each label present in y_true"""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return {
        label: float(np.mean(y_pred[y_true == label] != label))
        for label in range(n_classes) if np.any(y_true == label)
    }


def metrics_summary(gp: GroupedPredictions, n_classes: Optional[int] = None) -> Dict[str, Any]:
    """
    Every reported metric in one record

    EOp and DP are only meaningful for binary problems; they are reported
    for the configured positive label in any case.
    """
    n_classes = n_classes or int(max(gp.y_true.max(), gp.y_pred.max())) + 1
    accuracies = group_accuracies(gp)
    class_errors = per_class_error(gp.y_true, gp.y_pred, n_classes)
    summary = {
        "n": int(gp.y_true.size),
        "accuracy": overall_accuracy(gp),
        "worst_group_accuracy": min(accuracies.values()),
        "max_acc_disparity": _max_gap(list(accuracies.values())),
        "eop": eop(gp),
        "dp": dp(gp),
        "group_accuracies": {gp.name(g): acc for g, acc in accuracies.items()},
        "group_sizes": {gp.name(g): int(np.sum(gp.groups == g)) for g in accuracies},
        "class_errors": {str(k): v for k, v in class_errors.items()},
        "worst_class_error": max(class_errors.values()),
        "positive_label": int(gp.positive_label),
    }
    return summary
