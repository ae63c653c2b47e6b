"""Training losses: 1-vs-rest classification, pair classification,
reconstruction, and their sum.

All three losses are sums over the batch (not means).  Probabilities are
clamped to [1e-7, 1-1e-7] before any log so a saturated sigmoid cannot
produce an infinite loss; the clamp passes gradients through, so outputs
pushed past it keep their corrective signal (a hard clamp would zero the
gradient exactly where a saturated-wrong output most needs one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, clip_value

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step or per-epoch loss components; l_joint is always computed as
    l_ocn + l_pcn + l_ae in that order."""

    l_ocn: float
    l_pcn: float
    l_ae: float
    l_joint: float

    @classmethod
    def combine(cls, l_ocn: float, l_pcn: float, l_ae: float) -> "LossBreakdown":
        return cls(l_ocn, l_pcn, l_ae, l_ocn + l_pcn + l_ae)


def ocn_loss(probs: Tensor, labels) -> Tensor:
    """Sum of binary log losses of the per-class sigmoid outputs.

    For example i with class label y_i, output j is a positive target iff
    j == y_i; every output contributes its own binary term.
    """
    labels = np.asarray(labels)
    n, m = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"labels must lie in [0, {m}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, m), dtype=probs.dtype)
    onehot[np.arange(n), labels] = 1.0
    p = clip_value(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = Tensor(onehot) * p.log()
    neg = Tensor(1.0 - onehot) * (1.0 - p).log()
    return -(pos + neg).sum()


def pcn_loss(probs: Tensor, pair_labels) -> Tensor:
    """Binary log loss of same-class probabilities against 0/1 pair labels."""
    pair_labels = np.asarray(pair_labels)
    if probs.data.ndim != 1 or pair_labels.shape != probs.shape:
        raise ShapeError(
            f"pcn_loss expects 1-d probs and matching labels, got "
            f"{probs.shape} and {pair_labels.shape}"
        )
    y = pair_labels.astype(probs.dtype)
    p = clip_value(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(Tensor(y) * p.log() + Tensor(1.0 - y) * (1.0 - p).log()).sum()


def ae_loss(x: Tensor, xhat: Tensor, squared: bool = False) -> Tensor:
    """Sum over the batch of the per-example L2 norm of the pixel difference.

    ``squared=True`` switches to the squared norm (config alternative).
    """
    if x.shape != xhat.shape:
        raise ShapeError(f"reconstruction shape {xhat.shape} does not match input {x.shape}")
    diff = x - xhat
    axes = tuple(range(1, x.data.ndim))
    per_example = (diff * diff).sum(axis=axes)
    if squared:
        return per_example.sum()
    return per_example.sqrt().sum()
