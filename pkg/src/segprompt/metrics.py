"""Two-class classification metrics matching the result-table columns.

Precision, recall and F1 are macro-averaged over the two classes; a class
whose denominator is zero contributes 0 to the macro mean (stated so the
brute-force oracles can match bit for bit). AUC is the Mann-Whitney
concordance probability with ties counted one half.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float
    confusion: tuple[tuple[int, int], tuple[int, int]]  # [true][pred]
    n: int

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC via midranks; degenerate one-class input gives 0.5."""
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def compute(preds, scores, labels) -> MetricsReport:
    """Metrics for predicted classes, positive-class scores and true labels."""
    preds = np.asarray(preds, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not (len(preds) == len(scores) == len(labels)):
        raise DimensionError(
            f"compute: lengths disagree (preds {len(preds)}, scores {len(scores)}, "
            f"labels {len(labels)})"
        )
    if len(preds) == 0:
        raise ConfigurationError("compute: empty input")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ConfigurationError("compute: scores must be probabilities in [0,1]")

    conf = np.zeros((2, 2), dtype=np.int64)
    for t, p in zip(labels, preds):
        conf[t, p] += 1
    accuracy = float(np.trace(conf)) / len(preds)

    per_class_p, per_class_r, per_class_f = [], [], []
    for c in (0, 1):
        tp = conf[c, c]
        fp = conf[1 - c, c]
        fn = conf[c, 1 - c]
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        per_class_p.append(p)
        per_class_r.append(r)
        per_class_f.append(f)

    return MetricsReport(
        accuracy=accuracy,
        precision=float(np.mean(per_class_p)),
        recall=float(np.mean(per_class_r)),
        f1=float(np.mean(per_class_f)),
        auc=float(_rank_auc(scores, labels)),
        confusion=((int(conf[0, 0]), int(conf[0, 1])), (int(conf[1, 0]), int(conf[1, 1]))),
        n=len(preds),
    )


def dice(a, b) -> float:
    """Dice overlap of two foregrounds; two empty masks count as 1.0."""
    if a.values.shape != b.values.shape:
        raise DimensionError(f"dice: shapes {a.values.shape} and {b.values.shape} disagree")
    fa, fb = a.foreground, b.foreground
    total = int(fa.sum()) + int(fb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((fa & fb).sum()) / total


@dataclass(frozen=True)
class AggregateReport:
    """Mean and population std of each metric across folds (or seeds)."""

    stats: dict[str, tuple[float, float]]
    n_reports: int

    def mean(self, name: str) -> float:
        return self.stats[name][0]

    def std(self, name: str) -> float:
        return self.stats[name][1]


def aggregate(reports: list[MetricsReport]) -> AggregateReport:
    if not reports:
        raise ConfigurationError("aggregate: no reports given")
    stats = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports])
        stats[name] = (float(vals.mean()), float(vals.std()))
    return AggregateReport(stats, len(reports))
