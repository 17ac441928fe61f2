"""Ranking metrics: Mann-Whitney AUC, precision/recall/F1 at k, and MAP.

All of these are checked against brute-force reference implementations
in the test suite, so keep them boring and exact.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "RankedResult",
    "UndefinedMetricError",
    "auc",
    "precision_recall_f1",
    "average_precision",
    "mean_average_precision",
]


class UndefinedMetricError(ValueError):
    pass


@dataclass
class RankedResult:
    """Candidates ordered best-first, plus the ground-truth relevant set."""

    ranked_ids: list
    relevant: set


def auc(pos_scores, neg_scores):
    """P(random positive outranks random negative), ties counted 1/2."""
    pos, neg = list(pos_scores), list(neg_scores)
    if not pos or not neg:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def precision_recall_f1(result, k):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not result.relevant:
        raise UndefinedMetricError("recall undefined for empty relevant set")
    hits = sum(1 for cid in result.ranked_ids[:k] if cid in result.relevant)
    prec = hits / k
    rec = hits / len(result.relevant)
    f1 = 0.0 if prec + rec == 0 else 2.0 * prec * rec / (prec + rec)
    return prec, rec, f1


def average_precision(result):
    """Mean of precision@rank at each relevant hit, normalized by the
    relevant-set size."""
    if not result.relevant:
        raise UndefinedMetricError("AP undefined for empty relevant set")
    hits, total = 0, 0.0
    for rank, cid in enumerate(result.ranked_ids, start=1):
        if cid in result.relevant:
            hits += 1
            total += hits / rank
    return total / len(result.relevant)


def mean_average_precision(results):
    results = list(results)
    if not results:
        raise UndefinedMetricError("MAP over zero queries")
    return sum(average_precision(r) for r in results) / len(results)
