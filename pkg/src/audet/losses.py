"""Occurrence-weighted detection loss and the combined objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, UsageError
from .tensor import Tensor

logger = logging.getLogger(__name__)

_EPS = 1e-7


@dataclass
class LabelStats:
    """Training-set size and per-unit occurrence counts with derived weights.

    ``w`` balances units against each other (inverse occurrence, normalized
    to sum to 1); ``v`` balances occurrence against non-occurrence within a
    unit, equal to 1 exactly when the occurrence rate is one half.
    """

    n: int
    counts: np.ndarray
    w: np.ndarray
    v: np.ndarray


def compute_weights(counts, n: int) -> LabelStats:
    if n <= 0:
        raise UsageError(f"training-set size must be positive, got {n}")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0) or np.any(counts > n):
        raise UsageError(f"occurrence counts must lie in [0, {n}]")
    safe = counts.copy()
    if np.any(safe == 0):
        logger.warning("zero-occurrence units %s; substituting count 1 in weight denominators",
                       np.nonzero(safe == 0)[0].tolist())
        safe[safe == 0] = 1.0
    w = n / safe
    w = w / w.sum()
    v = (n - counts) / safe
    return LabelStats(n=int(n), counts=counts, w=w, v=v)


def au_detection_loss(probs: Tensor, labels: np.ndarray, stats: LabelStats) -> Tensor:
    """Weighted binary cross-entropy over units, averaged over the batch.

    ``- sum_j w_j [v_j p_j log p'_j + (1 - p_j) log(1 - p'_j)]`` with the
    predictions clamped to [eps, 1-eps] before the logs.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise DimensionError(f"probabilities {probs.shape} vs labels {labels.shape}")
    if labels.ndim != 2 or labels.shape[1] != stats.w.shape[0]:
        raise DimensionError(
            f"labels {labels.shape} do not match {stats.w.shape[0]} weighted units"
        )
    batch = labels.shape[0]
    p = T.clip(probs, _EPS, 1.0 - _EPS)
    dtype = probs.dtype
    pos = Tensor((stats.v[None, :] * labels * stats.w[None, :]).astype(dtype))
    neg = Tensor(((1.0 - labels) * stats.w[None, :]).astype(dtype))
    term = T.add(T.mul(T.log(p), pos), T.mul(T.log(T.sub(Tensor(np.ones(1, dtype=dtype)), p)), neg))
    return T.mul(T.sum_(term), -1.0 / batch)


def total_loss(l_u: Tensor, l_a=None, lambda_a: float = 0.0) -> Tensor:
    """Detection loss plus the weighted attention-regression loss."""
    if lambda_a < 0:
        raise UsageError(f"lambda_a must be nonnegative, got {lambda_a}")
    if l_a is None or lambda_a == 0.0:
        return l_u
    return T.add(l_u, T.mul(l_a, lambda_a))
