"""Dice loss and the binary-mask evaluation metrics: DSC, precision,
recall, volumetric overlap error and relative volume difference.

The loss is a batch Dice (sums taken over the whole batch before the
ratio) for gradient stability on lesion-free slices; evaluation metrics
are per sample.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def dice_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - smoothed Dice over the whole batch; differentiable, in [0, 1)."""
    if pred.shape != target.shape:
        raise ShapeError(f"dice_loss shape mismatch: {pred.shape} vs {target.shape}")
    if smooth <= 0:
        raise ValueError(f"smooth must be > 0, got {smooth}")
    inter = T.reduce_sum(pred * target)
    total = T.add(T.reduce_sum(pred), T.reduce_sum(target))
    ratio = T.div(T.add_scalar(T.mul_scalar(inter, 2.0), smooth),
                  T.add_scalar(total, smooth))
    return T.add_scalar(T.mul_scalar(ratio, -1.0), 1.0)


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


def _as_mask(m):
    m = np.asarray(m)
    if m.ndim == 4:
        m = m.reshape(m.shape[2], m.shape[3]) if m.shape[0] == m.shape[1] == 1 else m
    return m


def confusion(pred_mask, truth) -> ConfusionCounts:
    """Exact pixel counts between two binary masks of identical shape."""
    p = _as_mask(pred_mask).astype(bool)
    t = _as_mask(truth).astype(bool)
    if p.shape != t.shape:
        raise ShapeError(f"confusion shape mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def dsc(c: ConfusionCounts) -> float:
    """2*tp / (2*tp + fp + fn); both masks empty -> 1.0."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def precision(c: ConfusionCounts) -> float:
    """tp / (tp + fp); empty prediction -> 1.0 iff truth is also empty."""
    if c.tp + c.fp == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / (c.tp + c.fp)


def recall(c: ConfusionCounts) -> float:
    """tp / (tp + fn); empty truth -> 1.0 iff prediction is also empty."""
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fn)


def voe(c: ConfusionCounts) -> float:
    """100 * (1 - tp/union) in percent; both empty -> 0.0."""
    union = c.tp + c.fp + c.fn
    return 0.0 if union == 0 else 100.0 * (1.0 - c.tp / union)


def rvd(pred_mask, truth) -> float:
    """100 * (|pred| - |truth|) / |truth|, signed.

    Empty truth with a nonempty prediction is reported as +inf; both
    empty is 0.0.
    """
    p = int(np.count_nonzero(_as_mask(pred_mask)))
    t = int(np.count_nonzero(_as_mask(truth)))
    if t == 0:
        return 0.0 if p == 0 else math.inf
    return 100.0 * (p - t) / t


def binarize(prob, threshold: float = 0.5):
    """Strict comparison: 1 where prob > threshold."""
    data = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return (data > threshold).astype(np.uint8)


@dataclass
class SampleMetrics:
    subject_id: str
    slice_index: int
    dsc: float
    precision: float
    recall: float
    voe: float
    rvd: float


@dataclass
class MetricsReport:
    """Per-sample metric rows plus unweighted aggregate means.

    The aggregate RVD is reported both signed and over absolute values;
    rows with an infinite RVD (empty truth, nonempty prediction) are
    excluded from the RVD means.
    """

    rows: list = field(default_factory=list)
    mean_dsc: float = 0.0
    mean_precision: float = 0.0
    mean_recall: float = 0.0
    mean_voe: float = 0.0
    mean_rvd_signed: float = 0.0
    mean_rvd_abs: float = 0.0


def evaluate_pair(pred_mask, truth, subject_id="", slice_index=0) -> SampleMetrics:
    c = confusion(pred_mask, truth)
    return SampleMetrics(
        subject_id=subject_id,
        slice_index=slice_index,
        dsc=dsc(c),
        precision=precision(c),
        recall=recall(c),
        voe=voe(c),
        rvd=rvd(pred_mask, truth),
    )


def aggregate_report(rows) -> MetricsReport:
    """Unweighted per-sample means of every metric column."""
    if not rows:
        raise ValueError("aggregate_report needs at least one row")
    finite_rvd = [r.rvd for r in rows if math.isfinite(r.rvd)]
    return MetricsReport(
        rows=list(rows),
        mean_dsc=float(np.mean([r.dsc for r in rows])),
        mean_precision=float(np.mean([r.precision for r in rows])),
        mean_recall=float(np.mean([r.recall for r in rows])),
        mean_voe=float(np.mean([r.voe for r in rows])),
        mean_rvd_signed=float(np.mean(finite_rvd)) if finite_rvd else 0.0,
        mean_rvd_abs=float(np.mean(np.abs(finite_rvd))) if finite_rvd else 0.0,
    )


def write_report_csv(report: MetricsReport, path):
    """CSV with one row per sample and a final AGGREGATE row (signed RVD)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "slice", "dsc", "precision", "recall", "voe", "rvd"])
        for r in report.rows:
            writer.writerow([r.subject_id, r.slice_index, repr(r.dsc),
                             repr(r.precision), repr(r.recall), repr(r.voe),
                             repr(r.rvd)])
        writer.writerow(["AGGREGATE", "", repr(report.mean_dsc),
                         repr(report.mean_precision), repr(report.mean_recall),
                         repr(report.mean_voe), repr(report.mean_rvd_signed)])


def write_dsc_column(report: MetricsReport, path):
    """Plain one-value-per-line DSC column for external plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in report.rows:
            fh.write(repr(r.dsc) + "\n")
