"""Per-class rejection thresholds and open-set prediction.

Threshold fitting treats each class's predicted probabilities as the lower
half of a Gaussian centred at 1: every probability p contributes a mirror
point 2 - p, the standard deviation of the combined set is taken about the
fixed mean 1, and the class threshold is max(0.5, 1 - alpha * sigma).  An
example is rejected when every per-class probability sits below its
threshold; otherwise it is assigned the highest-probability class among
those at or above threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REJECTED = -1


@dataclass(frozen=True)
class ThresholdTable:
    """Per seen class: fitted sigma and decision threshold, plus alpha."""

    sigma: np.ndarray
    t: np.ndarray
    alpha: float

    def __post_init__(self):
        if np.any(self.t < 0.5) or np.any(self.t > 1.0):
            raise ValueError("thresholds must lie in [0.5, 1.0]")
        if len(self.sigma) != len(self.t):
            raise ValueError("sigma and t must have one entry per seen class")


@dataclass
class OpenPrediction:
    """verdicts[i] is a seen-class index or REJECTED; probs are kept for audit."""

    verdicts: np.ndarray
    probs: np.ndarray


@dataclass
class RejectedSet:
    """Rejected examples with their identifiers, true labels and probabilities."""

    example_ids: np.ndarray
    true_labels: np.ndarray
    probs: np.ndarray

    def __len__(self):
        return len(self.example_ids)


def fit_thresholds_from_probs(probs: np.ndarray, class_idx, alpha=3.0) -> ThresholdTable:
    """Fit the threshold table from precomputed probabilities.

    ``probs[i, j]`` is the j-th class output for training example i whose
    true dense class index is ``class_idx[i]``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    class_idx = np.asarray(class_idx)
    m = probs.shape[1]
    sigma = np.zeros(m)
    for j in range(m):
        p = probs[class_idx == j, j]
        if len(p) == 0:
            raise ValueError(f"class {j} has no training examples to fit a threshold")
        mirrored = np.concatenate([p, 2.0 - p])
        sigma[j] = np.sqrt(np.mean((mirrored - 1.0) ** 2))
    t = np.maximum(0.5, 1.0 - alpha * sigma)
    return ThresholdTable(sigma=sigma, t=t, alpha=alpha)


def fit_thresholds(model, images, class_idx, alpha=3.0) -> ThresholdTable:
    """Fit per-class thresholds from the model's outputs on seen training data."""
    return fit_thresholds_from_probs(model.ocn_probs(images), class_idx, alpha)


def predict_open(model, thresholds: ThresholdTable, images) -> OpenPrediction:
    """Classify-or-reject each image.

    Rejects when all probabilities fall below their class thresholds;
    otherwise picks the highest-probability class among those meeting
    theirs (ties go to the lowest class index), so an accepted verdict
    always satisfies p >= t for its own class.
    """
    probs = model.ocn_probs(images)
    return classify_probs(probs, thresholds)


def classify_probs(probs: np.ndarray, thresholds: ThresholdTable) -> OpenPrediction:
    passing = probs >= thresholds.t
    masked = np.where(passing, probs, -np.inf)
    verdicts = np.where(passing.any(axis=1), masked.argmax(axis=1), REJECTED)
    return OpenPrediction(verdicts=verdicts.astype(np.int64), probs=probs)


def collect_rejected(model, thresholds: ThresholdTable, images, true_labels) -> RejectedSet:
    """Run open prediction over a test set and keep the rejected examples
    (ground-truth labels ride along for evaluation only)."""
    pred = predict_open(model, thresholds, images)
    mask = pred.verdicts == REJECTED
    ids = np.flatnonzero(mask)
    return RejectedSet(
        example_ids=ids,
        true_labels=np.asarray(true_labels)[ids],
        probs=pred.probs[mask],
    )


def write_rejected_set(path, rejected: RejectedSet):
    """Columnar text export: example_id, true_label, then per-class probs."""
    m = rejected.probs.shape[1] if len(rejected) else 0
    header = "example_id true_label " + " ".join(f"p{j}" for j in range(m))
    with open(path, "w") as f:
        f.write(header.strip() + "\n")
        for i in range(len(rejected)):
            probs = " ".join(f"{p:.8f}" for p in rejected.probs[i])
            f.write(f"{rejected.example_ids[i]} {rejected.true_labels[i]} {probs}\n")


def read_rejected_set(path) -> RejectedSet:
    with open(path) as f:
        header = f.readline().split()
        if header[:2] != ["example_id", "true_label"]:
            raise ValueError(f"{path}: not a rejected-set file")
        ids, labels, probs = [], [], []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids.append(int(parts[0]))
            labels.append(int(parts[1]))
            probs.append([float(x) for x in parts[2:]])
    m = max(len(header) - 2, 0)
    return RejectedSet(
        example_ids=np.asarray(ids, dtype=np.int64),
        true_labels=np.asarray(labels, dtype=np.int64),
        probs=np.asarray(probs, dtype=np.float64).reshape(len(ids), m),
    )
