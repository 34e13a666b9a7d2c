"""Ranking metrics, classification metrics and paired significance tests."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .autodiff import ContractError


class MetricError(ValueError):
    """A metric is undefined for the given input."""


def _targets(targets) -> set:
    t = set(int(i) for i in targets)
    if not t:
        raise ContractError("empty target set; exclude the user before scoring")
    return t


def recall_at_k(ranked: Sequence[int], targets, k: int = 10, normalized: bool = True) -> float:
    """Hits in the top ``k`` over ``min(k, |targets|)`` (or ``|targets|``)."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    t = _targets(targets)
    hits = sum(1 for i in list(ranked)[:k] if int(i) in t)
    return hits / (min(k, len(t)) if normalized else len(t))


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(ranked: Sequence[int], targets, k: int = 10) -> float:
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    t = _targets(targets)
    top = list(ranked)[:k]
    disc = _discounts(k)
    dcg = sum(disc[pos] for pos, i in enumerate(top) if int(i) in t)
    idcg = disc[: min(k, len(t))].sum()
    return float(dcg / idcg)


class ConfusionCounts(NamedTuple):
    tp: np.ndarray     # correct predictions per class
    total: np.ndarray  # members per class

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int = 2) -> "ConfusionCounts":
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        total = np.bincount(y_true, minlength=n_classes)
        tp = np.bincount(y_true[y_true == y_pred], minlength=n_classes)
        return cls(tp, total)


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """Mean per-class recall."""
    tp = np.asarray(counts.tp, dtype=np.float64)
    total = np.asarray(counts.total, dtype=np.float64)
    if np.any(total <= 0):
        raise MetricError("balanced accuracy is undefined with an empty class")
    if np.any(tp > total):
        raise MetricError("true positives exceed class totals")
    return float(np.mean(tp / total))


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean(y_true == y_pred))


# ---------------------------------------------------------------------------
# significance tests


class TestResult(NamedTuple):
    statistic: float
    p_value: float
    significant: bool
    method: str


EXACT_WILCOXON_MAX_N = 25


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0 or len(a) != len(b):
        raise ContractError("paired samples must be aligned 1-d sequences of length >= 1")
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    return d, ranks


def _exact_signed_rank_p(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided p-value of W+ by counting all sign assignments.

    Average ranks are multiples of 1/2, so doubled ranks are integers and a
    subset-sum count gives the exact null distribution even with ties.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        counts[r:] = counts[r:] + counts[: total + 1 - r]
    n_assign = 2 ** len(ranks)
    w2 = int(round(2 * w_plus))
    lower = sum(counts[: w2 + 1])
    upper = sum(counts[w2:])
    p = 2 * min(lower, upper) / n_assign
    return min(1.0, float(p))


def wilcoxon_signed_rank(a, b, alpha: float = 0.05) -> TestResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and ties share average ranks. Exact for
    ``n <= 25`` nonzero differences, normal approximation (tie and
    continuity corrected) above that. The statistic is ``min(W+, W-)``.
    """
    d, ranks = _signed_ranks(a, b)
    n = len(d)
    if n == 0:
        return TestResult(0.0, 1.0, False, "degenerate")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        p = _exact_signed_rank_p(ranks, w_plus)
        method = "exact"
    else:
        p = _normal_signed_rank_p(ranks, w_plus)
        method = "normal"
    return TestResult(statistic, p, p < alpha, method)


def _normal_signed_rank_p(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    diff = abs(w_plus - mean)
    z = max(diff - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2 * stats.norm.sf(z)))


EXACT_MCNEMAR_MAX = 25


def mcnemar(correct_a, correct_b, alpha: float = 0.05) -> TestResult:
    """McNemar's test on paired per-user correctness.

    The reported statistic is always the continuity-corrected chi-square;
    the p-value is exact binomial when fewer than 25 pairs are discordant.
    """
    ca = np.asarray(correct_a, dtype=bool)
    cb = np.asarray(correct_b, dtype=bool)
    if ca.shape != cb.shape or ca.ndim != 1:
        raise ContractError("correctness vectors must be aligned 1-d arrays")
    b = int(np.sum(ca & ~cb))
    c = int(np.sum(~ca & cb))
    n = b + c
    if n == 0:
        return TestResult(0.0, 1.0, False, "degenerate")
    chi2 = max(abs(b - c) - 1, 0) ** 2 / n
    if n < EXACT_MCNEMAR_MAX:
        tail = sum(math.comb(n, i) for i in range(min(b, c) + 1))
        p = min(1.0, 2 * tail / 2 ** n)
        method = "exact"
    else:
        p = float(stats.chi2.sf(chi2, df=1))
        method = "chi2"
    return TestResult(float(chi2), float(p), p < alpha, method)
