"""Per-partner ranking and classification metrics with macro/micro pooling.

Ranked metrics order records by score descending and break ties by record id
ascending, so every value is a pure function of ``(scores, labels, ids)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

METRICS = ("auc", "ndcg", "ap", "precision")
K_CAP = 1000


class UndefinedMetricError(ValueError):
    """Metric has no value for this set (e.g. only one class present)."""


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    ids: np.ndarray | None = None
    partner: int | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(self.scores.size)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (self.scores.shape == self.labels.shape == self.ids.shape) or self.scores.ndim != 1:
            raise ValueError("scores, labels and ids must be 1-d arrays of equal length")
        if self.scores.size == 0:
            raise ValueError("a scored set needs at least one record")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return self.scores.size

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    def ranked_labels(self) -> np.ndarray:
        order = np.lexsort((self.ids, -self.scores))
        return self.labels[order]


def auto_k(n: int) -> int:
    """Desk-scale cutoff: ``min(1000, ceil(0.1 n))``, at least 1."""
    return max(1, min(K_CAP, math.ceil(0.1 * n)))


def resolve_k(k, n: int) -> int:
    if k in (None, "auto"):
        return auto_k(n)
    k = int(k)
    if k < 1:
        raise ValueError("k must be at least 1")
    return k


def auc_roc(s: ScoredSet) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    n_pos = s.n_pos
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both classes")
    ranks = rankdata(s.scores)
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def dcg_at_k(ranked: np.ndarray, k: int) -> float:
    top = ranked[:k].astype(np.float64)
    return float(np.sum(top / np.log2(np.arange(2, top.size + 2))))


def ndcg_at_k(s: ScoredSet, k=10) -> float:
    """DCG@k of the model ranking over the ideal DCG@k; 0 when there are no positives."""
    k = resolve_k(k, len(s))
    n_pos = s.n_pos
    if n_pos == 0:
        return 0.0
    ideal = dcg_at_k(np.ones(min(n_pos, k)), k)
    return dcg_at_k(s.ranked_labels(), k) / ideal


def average_precision(s: ScoredSet) -> float:
    """Sum of precision@i times the recall increment at i."""
    n_pos = s.n_pos
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    ranked = s.ranked_labels()
    hits = np.cumsum(ranked)
    precision = hits / np.arange(1, ranked.size + 1)
    return float(np.sum(precision * ranked) / n_pos)


def precision_at_k(s: ScoredSet, k=10) -> float:
    """Positives among the top ``min(k, n)`` records, divided by ``min(k, n)``."""
    k = min(resolve_k(k, len(s)), len(s))
    return float(s.ranked_labels()[:k].sum() / k)


def roc_points(s: ScoredSet) -> np.ndarray:
    """ROC staircase as an ``[m x 2]`` array of (FPR, TPR), one point per distinct threshold."""
    n_pos = s.n_pos
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both classes")
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1 - labels)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    fpr = np.r_[0.0, fp[ends] / n_neg]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    return np.column_stack([fpr, tpr])


def trapezoid_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def compute(metric: str, s: ScoredSet, k=None) -> float:
    if metric == "auc":
        return auc_roc(s)
    if metric == "ap":
        return average_precision(s)
    if metric == "ndcg":
        if s.n_pos == 0:
            raise UndefinedMetricError("NDCG is excluded for sets without positives")
        return ndcg_at_k(s, k)
    if metric == "precision":
        return precision_at_k(s, k)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class EvalReport:
    per_partner: dict[int, dict[str, float]]
    macro: dict[str, float | None]
    micro: dict[str, float | None]
    n_included: dict[str, int]
    excluded: dict[str, list[tuple[int, str]]] = field(default_factory=dict)
    k: object = "auto"


def aggregate(sets: list[ScoredSet], k="auto", metrics=METRICS) -> EvalReport:
    """Macro (unweighted partner mean) and micro (pooled) values of each metric.

    Partners where a metric is undefined are left out of its macro mean and
    listed in ``excluded``; a metric with no includable partner gets ``None``.
    """
    if not sets:
        raise ValueError("aggregate needs at least one partner")
    per_partner: dict[int, dict[str, float]] = {}
    excluded: dict[str, list] = {m: [] for m in metrics}
    values: dict[str, list[float]] = {m: [] for m in metrics}
    for i, s in enumerate(sets):
        pid = s.partner if s.partner is not None else i
        row = per_partner.setdefault(pid, {})
        for m in metrics:
            try:
                v = compute(m, s, k)
            except UndefinedMetricError as exc:
                excluded[m].append((pid, str(exc)))
                continue
            row[m] = v
            values[m].append(v)
    macro = {m: (math.fsum(values[m]) / len(values[m]) if values[m] else None) for m in metrics}

    pooled = ScoredSet(
        np.concatenate([s.scores for s in sets]),
        np.concatenate([s.labels for s in sets]),
        np.concatenate([s.ids for s in sets]),
    )
    micro = {}
    for m in metrics:
        try:
            micro[m] = compute(m, pooled, k)
        except UndefinedMetricError:
            micro[m] = None
    return EvalReport(per_partner, macro, micro, {m: len(values[m]) for m in metrics}, excluded, k)
