"""Presence F1, overlap scores, true-positive gating and run aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import check_same_length

SUPPRESS_STD_BELOW = 0.03
N_RUNS = 3


@dataclass(frozen=True)
class RunAggregate:
    mean: float
    std: float
    suppressed: bool

    @property
    def absent(self) -> bool:
        return math.isnan(self.mean)

    def format(self, digits: int = 2) -> str:
        return format_aggregate(self, digits)


def presence_f1(scores, labels, t: float) -> tuple[float, float, float]:
    """``(f1, precision, recall)`` for ``prediction = score >= t``; 0 when undefined."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    check_same_length(scores, labels)
    pred = scores >= t
    tp = int(np.count_nonzero(pred & labels))
    fp = int(np.count_nonzero(pred & ~labels))
    fn = int(np.count_nonzero(~pred & labels))
    return f1_from_counts(tp, fp, fn)


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def overlap_scores(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """``(dice, iou)`` of two boolean masks. Two empty masks count as a perfect match."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    n_pred = int(np.count_nonzero(pred))
    n_gt = int(np.count_nonzero(gt))
    if n_pred + n_gt == 0:
        return 1.0, 1.0
    union = n_pred + n_gt - inter
    return 2 * inter / (n_pred + n_gt), inter / union


def tp_gate(scores: Mapping[str, float], labels: Mapping[str, bool], t_detect: float) -> list[str]:
    """Tiles predicted positive at ``t_detect`` that are truly positive, in input order."""
    return [tid for tid, s in scores.items() if s >= t_detect and labels[tid]]


def no_overlap_rate(dices: Iterable[float]) -> float | None:
    dices = list(dices)
    if not dices:
        return None
    return sum(1 for d in dices if d == 0) / len(dices)


def summarize_runs(values: Sequence[float]) -> RunAggregate:
    """Mean and sample std over the runs that produced a value (NaN = absent)."""
    vals = np.array([v for v in values if v is not None and not math.isnan(v)], dtype=float)
    if len(vals) == 0:
        return RunAggregate(math.nan, math.nan, True)
    mean = float(vals.mean())
    std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return RunAggregate(mean, std, std < SUPPRESS_STD_BELOW)


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    """Aggregate exactly three runs; the std is hidden when below 0.03."""
    if len(values) != N_RUNS:
        raise ValueError(f"expected exactly {N_RUNS} run values, got {len(values)}")
    return summarize_runs(values)


def format_aggregate(agg: RunAggregate, digits: int = 2) -> str:
    if agg.absent:
        return "-"
    if agg.suppressed:
        return f"{agg.mean:.{digits}f}"
    return f"{agg.mean:.{digits}f} (±{agg.std:.{digits}f})"
