"""Ranking and thresholded classification metrics."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class MetricReport:
    auc: float
    precision_at_half: float | None
    recall_at_half: float
    f1: float
    precision_at_k: dict[int, float] = field(default_factory=dict)
    n_pos: int = 0
    n_neg: int = 0
    n_predicted_pos: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision_at_k"] = {str(k): v for k, v in self.precision_at_k.items()}
        return d


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be a 1-D array of 0/1")
    return y.astype(np.int64)


def _midranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # run boundaries of equal scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    for a, b in zip(starts, ends):
        ranks[a:b] = (a + 1 + b) / 2.0
    out = np.empty(len(s))
    out[order] = ranks
    return out


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outranks random negative); ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    # midranks are half-integers, so the U statistic is exact in float64
    u = _midranks(s)[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def threshold_metrics(scores: Sequence[float], labels: Sequence[int],
                      t: float = 0.5) -> tuple[float | None, float, float]:
    """(precision, recall, f1) with predicted positive iff score >= t.

    Precision is None when nothing is predicted positive; f1 is 0 whenever
    precision or recall is 0 or undefined.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _check_binary(labels)
    pred = s >= t
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else None
    if precision is None:
        logger.debug("no predicted positives at threshold %.3f (%d positives)", t, tp + fn)
    recall = tp / (tp + fn) if tp + fn else 0.0
    if not precision or not recall:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def top_k_order(scores: Sequence[float], ids: Sequence[str] | None = None) -> np.ndarray:
    """Row indices by descending score, ties by ascending id (row index if no ids)."""
    s = np.asarray(scores, dtype=np.float64)
    if ids is None:
        return np.lexsort((np.arange(len(s)), -s))
    return np.array(sorted(range(len(s)), key=lambda i: (-s[i], ids[i])), dtype=np.int64)


def precision_at_k(scores: Sequence[float], labels: Sequence[int], k: int,
                   ids: Sequence[str] | None = None) -> float:
    y = _check_binary(labels)
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > len(y):
        logger.warning("K=%d exceeds population %d; clamping", k, len(y))
        k = len(y)
    top = top_k_order(scores, ids)[:k]
    return float(y[top].sum() / k)


def metric_report(scores, labels, ks: Sequence[int] = (100, 500), t: float = 0.5,
                  ids: Sequence[str] | None = None) -> MetricReport:
    y = _check_binary(labels)
    precision, recall, f1 = threshold_metrics(scores, y, t)
    return MetricReport(
        auc=auc(scores, y),
        precision_at_half=precision,
        recall_at_half=recall,
        f1=f1,
        precision_at_k={k: precision_at_k(scores, y, k, ids) for k in ks},
        n_pos=int(y.sum()),
        n_neg=int(len(y) - y.sum()),
        n_predicted_pos=int(np.sum(np.asarray(scores) >= t)),
    )


def expected_auc(probabilities: Sequence[float]) -> float:
    """AUC of scoring by the true probabilities, in expectation over the labels.

    With independent labels ``y_i ~ Bernoulli(p_i)`` the expected numbers of
    correctly ordered and tied positive/negative pairs are sums of
    ``p_i (1 - p_j)``; this returns their ratio computed exactly in
    O(n log n).
    """
    p = np.asarray(probabilities, dtype=np.float64)
    order = np.argsort(p, kind="mergesort")
    ps = p[order]
    neg = 1.0 - ps
    starts = np.flatnonzero(np.r_[True, ps[1:] != ps[:-1]])
    ends = np.r_[starts[1:], len(ps)]
    num = 0.0
    below = 0.0  # sum of (1 - p_j) over strictly lower scores
    for a, b in zip(starts, ends):
        pos_g = ps[a:b].sum()
        neg_g = neg[a:b].sum()
        cross_g = np.dot(ps[a:b], neg[a:b])  # i == j pairs inside the tie group
        num += pos_g * below + 0.5 * (pos_g * neg_g - cross_g)
        below += neg_g
    total = p.sum() * (1.0 - p).sum() - np.dot(p, 1.0 - p)
    return float(num / total)
