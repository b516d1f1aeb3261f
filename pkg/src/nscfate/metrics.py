"""Accuracy, confusion matrix, and one-vs-rest ROC/AUC.

ROC curves sweep the distinct score values in descending order with tied
scores entering together, so the trapezoidal AUC equals the pairwise
statistic P(score_pos > score_neg) + 0.5 * P(score_pos = score_neg).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateClassError, LabelRangeError, NumericError, ShapeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # K x K, rows = true class, columns = predicted
    class_names: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending distinct scores
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    positive_class: str = ""


@dataclass
class EvalReport:
    split: str
    accuracy: float
    confusion: ConfusionMatrix
    per_class_auc: dict
    macro_auc: float
    sample_count: int
    model_checksum: str = ""
    roc_curves: dict = field(default_factory=dict)


def compute_accuracy(predictions, truths) -> float:
    preds = np.asarray(predictions)
    trues = np.asarray(truths)
    if preds.shape != trues.shape or preds.size == 0:
        raise ShapeError(f"predictions {preds.shape} vs truths {trues.shape}")
    return float(np.count_nonzero(preds == trues)) / preds.size


def compute_confusion_matrix(predictions, truths, class_count: int, class_names=()) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64)
    trues = np.asarray(truths, dtype=np.int64)
    if preds.shape != trues.shape:
        raise ShapeError(f"predictions {preds.shape} vs truths {trues.shape}")
    if preds.size and (
        preds.min() < 0 or preds.max() >= class_count or trues.min() < 0 or trues.max() >= class_count
    ):
        raise LabelRangeError(f"indices outside [0, {class_count})")
    counts = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(counts, (trues, preds), 1)
    names = tuple(class_names) or tuple(str(i) for i in range(class_count))
    return ConfusionMatrix(counts=counts, class_names=names)


def compute_roc_curve(scores, binary_truths, positive_class: str = "") -> RocCurve:
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(binary_truths, dtype=np.int64)
    if scores.shape != truths.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} vs truths {truths.shape}")
    if not np.isfinite(scores).all():
        raise NumericError("scores contain non-finite values")
    n_pos = int(truths.sum())
    n_neg = truths.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(f"both classes must be present (pos={n_pos}, neg={n_neg})")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truths = truths[order]
    # Group tied scores into single threshold steps.
    distinct_mask = np.empty(sorted_scores.size, dtype=bool)
    distinct_mask[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    distinct_mask[-1] = True
    cum_tp = np.cumsum(sorted_truths)[distinct_mask]
    cum_fp = np.cumsum(1 - sorted_truths)[distinct_mask]

    tpr = np.concatenate(([0.0], cum_tp / n_pos))
    fpr = np.concatenate(([0.0], cum_fp / n_neg))
    thresholds = sorted_scores[distinct_mask]
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc, positive_class=positive_class)


def one_vs_rest_auc(probabilities, truths, class_names=()):
    """Per-class one-vs-rest AUCs plus their unweighted mean.

    Returns (auc_by_class, macro_auc, curves_by_class).
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    trues = np.asarray(truths, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != trues.size:
        raise ShapeError(f"probabilities {probs.shape} vs truths {trues.shape}")
    k = probs.shape[1]
    names = tuple(class_names) or tuple(str(i) for i in range(k))
    aucs, curves = {}, {}
    for c in range(k):
        binary = (trues == c).astype(np.int64)
        if binary.sum() == 0:
            raise DegenerateClassError(names[c])
        curve = compute_roc_curve(probs[:, c], binary, positive_class=names[c])
        aucs[names[c]] = curve.auc
        curves[names[c]] = curve
    macro = float(np.mean(list(aucs.values())))
    return aucs, macro, curves
