"""Anytime accuracy area, last accuracy and forgetting."""

from __future__ import annotations

import logging
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def a_auc(curve: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under accuracy vs. samples seen, divided by the x-range.

    A single point returns its accuracy.
    """
    if len(curve) == 0:
        raise MetricError("accuracy curve is empty")
    xs = np.asarray([p[0] for p in curve], dtype=np.float64)
    ys = np.asarray([p[1] for p in curve], dtype=np.float64)
    if np.any(np.diff(xs) <= 0):
        raise MetricError("curve x values must be strictly increasing")
    if len(xs) == 1:
        return float(ys[0])
    area = np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0)
    return float(area / (xs[-1] - xs[0]))


def a_last(record) -> float:
    """Final full-test accuracy of a finished run (RunRecord or mapping)."""
    value = record.get("final_full_test_acc") if isinstance(record, Mapping) else getattr(
        record, "final_full_test_acc", None
    )
    if value is None or (isinstance(value, float) and math.isnan(value)):
        raise MetricError("run has no final evaluation (incomplete run)")
    return float(value)


def top1_accuracy(predictions: Iterable[int], labels: Iterable[int]) -> float:
    preds, labs = list(predictions), list(labels)
    if len(preds) != len(labs) or not labs:
        raise MetricError("predictions and labels must be equal-length and non-empty")
    return sum(int(p == t) for p, t in zip(preds, labs)) / len(labs)


def forgetting(per_class_best: Sequence[float], per_class_final: Sequence[float]) -> float:
    """Mean over classes of ``max(0, best - final)``.

    NaN entries mark classes never evaluated; they are dropped with a warning.
    """
    best = np.asarray(per_class_best, dtype=np.float64)
    final = np.asarray(per_class_final, dtype=np.float64)
    if best.shape != final.shape:
        raise MetricError("best and final vectors differ in length")
    ok = ~(np.isnan(best) | np.isnan(final))
    if not ok.all():
        logger.warning("forgetting: %d classes never evaluated, excluded", int((~ok).sum()))
    if not ok.any():
        raise MetricError("no class was evaluated")
    return float(np.mean(np.maximum(0.0, best[ok] - final[ok])))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation; std is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise MetricError("nothing to aggregate")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def format_mean_std(values: Sequence[float], scale: float = 100.0) -> str:
    m, s = mean_std(values)
    return f"{m * scale:.2f}±{s * scale:.2f}"
