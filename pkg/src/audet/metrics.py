"""Frame-level F1 evaluation and report formatting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass
class EvalCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


def confusion_counts(predictions, labels, threshold: float = 0.5) -> EvalCounts:
    preds = np.asarray(predictions)
    labels = np.asarray(labels).astype(bool)
    if preds.shape != labels.shape:
        raise DimensionError(f"predictions {preds.shape} vs labels {labels.shape}")
    binary = preds >= threshold
    tp = np.logical_and(binary, labels).sum(axis=0)
    fp = np.logical_and(binary, ~labels).sum(axis=0)
    fn = np.logical_and(~binary, labels).sum(axis=0)
    return EvalCounts(tp=tp, fp=fp, fn=fn)


def f1_frame(predictions, labels, threshold: float = 0.5):
    """Per-unit F1 in percent plus the average over units.

    Predictions are binarized at the threshold; F1 = 2PR/(P+R) with the
    convention that an undefined precision, recall, or F1 is 0.
    """
    c = confusion_counts(predictions, labels, threshold)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(c.tp + c.fp > 0, c.tp / np.maximum(c.tp + c.fp, 1), 0.0)
        recall = np.where(c.tp + c.fn > 0, c.tp / np.maximum(c.tp + c.fn, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / np.maximum(denom, 1e-300), 0.0)
    per_unit = f1 * 100.0
    return per_unit, float(per_unit.mean())


def format_report(au_ids, per_unit, avg) -> str:
    """Per-unit F1 table with one decimal and an Avg column."""
    header = ["AU"] + [str(a) for a in au_ids] + ["Avg"]
    values = ["F1"] + [f"{v:.1f}" for v in per_unit] + [f"{avg:.1f}"]
    widths = [max(len(h), len(v)) for h, v in zip(header, values)]
    line1 = "  ".join(h.rjust(w) for h, w in zip(header, widths))
    line2 = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return line1 + "\n" + line2
