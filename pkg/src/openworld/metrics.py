"""Evaluation measures: confusion tables over m seen classes plus a
rejection class, macro-F, rejection precision/recall/F, pairwise accuracy,
and normalized mutual information.

All zero-denominator cases (precision, recall, F, NMI with a degenerate
partition) return 0, so trivial outputs never score well.
"""

from __future__ import annotations

import numpy as np

from .rejection import REJECTED


def confusion_table(true_class_idx, verdicts, m) -> np.ndarray:
    """(m+1) x (m+1) counts; row = truth, column = prediction; index m is
    the rejection class.  Inputs use dense class indices with REJECTED (-1)
    marking unseen truth / rejected verdicts."""
    true_class_idx = np.asarray(true_class_idx)
    verdicts = np.asarray(verdicts)
    if true_class_idx.shape != verdicts.shape:
        raise ValueError("truth and verdict arrays must align")
    t = np.where(true_class_idx == REJECTED, m, true_class_idx)
    p = np.where(verdicts == REJECTED, m, verdicts)
    table = np.zeros((m + 1, m + 1), dtype=np.int64)
    np.add.at(table, (t, p), 1)
    return table


def _prf(table, cls):
    tp = table[cls, cls]
    fp = table[:, cls].sum() - tp
    fn = table[cls, :].sum() - tp
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return float(precision), float(recall), float(f)


def macro_f(table) -> float:
    """Unweighted mean F1 over all m+1 classes (absent classes count as 0)."""
    table = np.asarray(table)
    if table.size == 0:
        raise ValueError("empty confusion table")
    return float(np.mean([_prf(table, c)[2] for c in range(table.shape[0])]))


def rejection_prf(table) -> tuple[float, float, float]:
    """Precision/recall/F of the rejection class (the last row/column)."""
    table = np.asarray(table)
    if table.size == 0:
        raise ValueError("empty confusion table")
    return _prf(table, table.shape[0] - 1)


def pairwise_accuracy(probs, pair_labels) -> float:
    """Fraction of pairs classified correctly at the 0.5 probability cut."""
    probs = np.asarray(probs)
    pair_labels = np.asarray(pair_labels)
    if probs.shape != pair_labels.shape:
        raise ValueError("probabilities and labels must align")
    if len(probs) == 0:
        raise ValueError("no pairs to score")
    pred = (probs >= 0.5).astype(np.int64)
    return float((pred == pair_labels).mean())


def nmi(pred_labels, true_labels) -> float:
    """Mutual information normalized by the geometric mean of the two
    partition entropies (natural log; the base cancels)."""
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise ValueError("partitions must cover the same examples")
    n = len(pred_labels)
    if n == 0:
        raise ValueError("empty partitions")
    _, ci = np.unique(pred_labels, return_inverse=True)
    _, yi = np.unique(true_labels, return_inverse=True)
    joint = np.zeros((ci.max() + 1, yi.max() + 1))
    np.add.at(joint, (ci, yi), 1.0)
    pc = joint.sum(axis=1) / n
    py = joint.sum(axis=0) / n
    nz = joint > 0
    pij = joint / n
    outer = pc[:, None] * py[None, :]
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    hc = float(-(pc[pc > 0] * np.log(pc[pc > 0])).sum())
    hy = float(-(py[py > 0] * np.log(py[py > 0])).sum())
    if hc <= 0.0 or hy <= 0.0:
        return 0.0
    return mi / np.sqrt(hc * hy)
