"""Classification metrics for imbalanced data.

Confusion matrices are ``[n_classes, n_classes]`` with rows = true class and
columns = predicted class.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def confusion_matrix(labels, preds, n_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise ValueError("labels and predictions must have the same length")
    if n_classes is None:
        n_classes = int(max(labels.max(initial=-1), preds.max(initial=-1))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def balanced_accuracy(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1)
    empty = np.flatnonzero(support == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no true samples")
    return float(np.mean(np.diag(cm) / support))


def cohens_kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n <= 0:
        raise ValueError("empty confusion matrix")
    p_o = np.trace(cm) / n
    p_e = float(np.sum(cm.sum(axis=1) * cm.sum(axis=0))) / (n * n)
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def weighted_f1(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n <= 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    # F1 = 2TP / (2TP + FP + FN); defined as 0 when the denominator vanishes
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(np.sum(support / n * f1))


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary 0/1")
    if labels.min() == labels.max():
        raise ValueError("need both positive and negative labels")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney rank statistic with tied scores sharing the average rank."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Step-wise area under precision-recall: sum over thresholds of dRecall * precision.

    Thresholds are the distinct scores in decreasing order; tied scores enter together.
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = (last_of_group + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def report(task: str, split: str, labels, probs) -> dict:
    """Metric report for predicted class probabilities [N, n_classes]."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = probs.shape[1]
    cm = confusion_matrix(labels, probs.argmax(axis=1), n_classes)
    out = {
        "task": task,
        "split": split,
        "balanced_accuracy": balanced_accuracy(cm),
        "kappa": cohens_kappa(cm),
        "weighted_f1": weighted_f1(cm),
        "auroc": None,
        "auc_pr": None,
        "n": int(labels.size),
    }
    if n_classes == 2 and 0 < labels.sum() < labels.size:
        out["auroc"] = auroc(probs[:, 1], labels)
        out["auc_pr"] = auc_pr(probs[:, 1], labels)
    return out


def write_report(path: str | Path, rep: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rep, indent=2))
