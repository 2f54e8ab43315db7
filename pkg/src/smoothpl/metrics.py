"""Evaluation metrics and paired statistics for fold-wise comparisons."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import InputError
from .losses import LossConfig, pseudo_labels

EXACT_CUTOFF = 20
ALTERNATIVES = ("greater", "less", "two_sided")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows indexed by ground truth and columns by prediction."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise InputError("confusion counts must be square")
        if np.any(c < 0):
            raise InputError("confusion counts must be nonnegative")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def confusion(preds, gts, n: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=int).ravel()
    gts = np.asarray(gts, dtype=int).ravel()
    if preds.shape != gts.shape:
        raise InputError("preds and gts must be aligned")
    for name, v in (("pred", preds), ("gt", gts)):
        if len(v) and (v.min() < 0 or v.max() >= n):
            raise InputError(f"{name} class outside [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (gts, preds), 1)
    return ConfusionMatrix(counts)


def error_rate(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise InputError("error rate of an empty confusion matrix")
    return 1.0 - np.trace(cm.counts) / cm.total


def collapsed_classes(cm: ConfusionMatrix, eps: float = 0.2) -> set[int]:
    """Classes predicted less often than ``eps`` times their uniform share."""
    if not 0.0 <= eps < 1.0:
        raise InputError("eps must lie in [0, 1)")
    if cm.total == 0:
        return set()
    share = cm.counts.sum(axis=0) / cm.total
    return {int(j) for j in np.flatnonzero(share < eps / cm.n_classes)}


@dataclass(frozen=True)
class PseudoLabelStats:
    coverage: float
    purity: float | None  # None when nothing is accepted
    mean_weight: float


def pseudo_label_stats(model_probs_weak, gts, cfg: LossConfig) -> PseudoLabelStats:
    probs = np.asarray(model_probs_weak, dtype=float)
    gts = np.asarray(gts, dtype=int)
    if probs.ndim != 2 or len(probs) == 0:
        raise InputError("need a nonempty (m, n) probability matrix")
    if len(gts) != len(probs):
        raise InputError("probabilities and ground truth must be aligned")
    pl = pseudo_labels(probs, cfg)
    accepted = pl.accepted
    coverage = float(accepted.mean())
    purity = float(np.mean(pl.classes[accepted] == gts[accepted])) if accepted.any() else None
    return PseudoLabelStats(coverage, purity, float(pl.weight.mean()))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonOutcome:
    n_effective: int
    statistic: float  # sum of ranks of positive differences
    p_value: float
    alternative: str
    tie_count: int  # number of zero differences dropped
    exact: bool
    degenerate: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def midranks(values) -> np.ndarray:
    """Ranks starting at 1, ties receiving the average of their positions."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v))
    sorted_v = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _null_distribution(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each subset sum of ``doubled_ranks`` over all sign assignments."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def _exact_p(doubled: np.ndarray, w2: int, alternative: str) -> float:
    dist = _null_distribution(doubled)
    total = float(dist.sum())
    upper = dist[w2:].sum() / total
    lower = dist[: w2 + 1].sum() / total
    if alternative == "greater":
        return float(upper)
    if alternative == "less":
        return float(lower)
    return float(min(1.0, 2.0 * min(upper, lower)))


def _normal_p(ranks: np.ndarray, w: float, alternative: str) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_sizes**3 - tie_sizes) / 48.0
    z = (w - mean) / math.sqrt(var)
    upper = 0.5 * math.erfc(z / math.sqrt(2.0))
    lower = 0.5 * math.erfc(-z / math.sqrt(2.0))
    if alternative == "greater":
        return upper
    if alternative == "less":
        return lower
    return min(1.0, 2.0 * min(upper, lower))


def wilcoxon_one_sided(diffs: Sequence[float], alternative: str = "greater") -> WilcoxonOutcome:
    """Signed-rank test of median(diffs) against zero.

    Zero differences are dropped. The p-value is exact (full enumeration of
    sign assignments over mid-ranks) up to ``EXACT_CUTOFF`` nonzero
    differences and a tie-corrected normal approximation beyond.
    """
    if alternative not in ALTERNATIVES:
        raise InputError(f"alternative must be one of {ALTERNATIVES}")
    d = np.asarray(diffs, dtype=float).ravel()
    if len(d) == 0:
        raise InputError("need at least one difference")
    if not np.all(np.isfinite(d)):
        raise InputError("differences must be finite")
    nonzero = d[d != 0]
    zeros = len(d) - len(nonzero)
    if len(nonzero) == 0:
        return WilcoxonOutcome(0, 0.0, 1.0, alternative, zeros, True, degenerate=True)
    ranks = midranks(np.abs(nonzero))
    w = float(ranks[nonzero > 0].sum())
    if len(nonzero) <= EXACT_CUTOFF:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = _exact_p(doubled, int(round(2 * w)), alternative)
        exact = True
    else:
        p = _normal_p(ranks, w, alternative)
        exact = False
    return WilcoxonOutcome(len(nonzero), w, p, alternative, zeros, exact)


# ---------------------------------------------------------------------------
# Paired summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GainSummary:
    mean: float
    std: float | None  # None for a single fold
    max: float
    min: float
    range: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def paired_gain(a, b, ddof: int = 1) -> GainSummary:
    """Summary of per-fold gains ``a - b`` (``a`` baseline error, ``b`` method error)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("a and b must be aligned 1-D arrays")
    if len(a) == 0:
        raise InputError("need at least one fold")
    g = a - b
    std = float(np.std(g, ddof=ddof)) if len(g) > ddof else None
    return GainSummary(float(g.mean()), std, float(g.max()), float(g.min()), float(g.max() - g.min()))
