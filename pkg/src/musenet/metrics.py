"""Classification metrics and divergence utilities.

AUROC follows the Mann-Whitney pairwise formulation (ties count one half),
AUPRC is average precision with a documented tie order (score descending,
positives first), and F1/recall use the plain confusion-matrix definitions
with 0/0 conventions mapped to zero.  The KL helpers back the ensemble
variance report that compares multi-branch against single-branch
prediction spread across training seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class SingleClass(ValueError):
    pass


class NoPositives(ValueError):
    pass


class SupportViolation(ValueError):
    pass


class InsufficientSeeds(ValueError):
    pass


def _split_items(items):
    scores = np.asarray([s for s, _ in items], dtype=float)
    labels = np.asarray([int(l) for _, l in items])
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return scores, labels


def auroc(items) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties half.

    Computed through average ranks, which is exactly the pairwise count.
    """
    scores, labels = _split_items(items)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("need both classes for AUROC")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(items) -> float:
    """Average precision: precision at each positive times the recall step.

    Ties are ordered score-descending with positives first, and that
    convention is part of the metric's contract here.
    """
    scores, labels = _split_items(items)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("need at least one positive for average precision")
    order = sorted(range(labels.size),
                   key=lambda i: (-scores[i], -labels[i]))
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def f1_recall(items, threshold: float = 0.5) -> tuple[float, float]:
    """(F1, recall) at a fixed threshold; empty denominators give zero."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    scores, labels = _split_items(items)
    predicted = scores >= threshold
    tp = int(np.sum(predicted & (labels == 1)))
    fp = int(np.sum(predicted & (labels == 0)))
    fn = int(np.sum(~predicted & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) \
        if precision + recall else 0.0
    return f1, recall


def kl_divergence(p, q) -> float:
    """sum p_j log(p_j / q_j); zero p terms contribute zero."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise SupportViolation("distributions must share a shape")
    support = p > 0
    if np.any(q[support] <= 0):
        raise SupportViolation("q must be positive wherever p is")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def cross_entropy(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    if np.any(q[support] <= 0):
        raise SupportViolation("q must be positive wherever p is")
    return float(-np.sum(p[support] * np.log(q[support])))


def arithmetic_mean_distribution(distributions) -> np.ndarray:
    stacked = np.stack([np.asarray(d, dtype=float) for d in distributions])
    return stacked.mean(axis=0)


def geometric_mean_distribution(distributions) -> np.ndarray:
    """Normalized geometric mean; the mean-KL minimizer over the first slot."""
    stacked = np.stack([np.asarray(d, dtype=float) for d in distributions])
    if np.any(stacked <= 0):
        raise SupportViolation("geometric mean needs strictly positive mass")
    logs = np.log(stacked).mean(axis=0)
    raw = np.exp(logs - logs.max())
    return raw / raw.sum()


@dataclass
class EnsembleVarianceReport:
    """Seed-spread comparison between multi-branch and single-branch models.

    Variance is the mean KL divergence from a barycenter of the per-seed
    predictive distributions to each seed's prediction.  Both barycenter
    estimators are reported: the arithmetic mean and the normalized
    geometric mean.
    """

    mb_variance_arithmetic: float
    sb_variance_arithmetic: float
    mb_variance_geometric: float
    sb_variance_geometric: float
    n_seeds_mb: int
    n_seeds_sb: int

    @property
    def mb_no_larger(self) -> bool:
        return self.mb_variance_arithmetic <= self.sb_variance_arithmetic


def _binary_distributions(probabilities) -> np.ndarray:
    probs = np.asarray(probabilities, dtype=float)
    probs = np.clip(probs, 1e-12, 1.0 - 1e-12)
    return np.stack([probs, 1.0 - probs], axis=-1)


def prediction_spread(per_seed_probabilities) -> tuple[float, float]:
    """(arithmetic, geometric) barycenter mean-KL over records and seeds.

    Input: (n_seeds, n_records) positive-class probabilities.
    """
    probs = np.asarray(per_seed_probabilities, dtype=float)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise InsufficientSeeds("need a (seeds >= 2, records) probability grid")
    dists = _binary_distributions(probs)          # (seeds, records, 2)
    arith = dists.mean(axis=0)                    # (records, 2)
    logs = np.log(dists).mean(axis=0)
    geo = np.exp(logs)
    geo = geo / geo.sum(axis=-1, keepdims=True)
    kl_arith = np.sum(arith[None] * (np.log(arith[None]) - np.log(dists)),
                      axis=-1)
    kl_geo = np.sum(geo[None] * (np.log(geo[None]) - np.log(dists)), axis=-1)
    return float(kl_arith.mean()), float(kl_geo.mean())


def ensemble_variance_report(mb_per_seed, sb_per_seed) -> EnsembleVarianceReport:
    """Compare seed variance of multi-branch vs single-branch predictions."""
    mb = np.asarray(mb_per_seed, dtype=float)
    sb = np.asarray(sb_per_seed, dtype=float)
    mb_arith, mb_geo = prediction_spread(mb)
    sb_arith, sb_geo = prediction_spread(sb)
    return EnsembleVarianceReport(
        mb_variance_arithmetic=mb_arith, sb_variance_arithmetic=sb_arith,
        mb_variance_geometric=mb_geo, sb_variance_geometric=sb_geo,
        n_seeds_mb=mb.shape[0], n_seeds_sb=sb.shape[0])


def jensen_gap(target, branch_distributions) -> float:
    """mean_i CE(target, branch_i) - CE(target, mean of branches).

    Nonnegative for every probability tuple: the cross-entropy against the
    arithmetic mean never exceeds the mean cross-entropy (the geometric
    mean of positives is at most their arithmetic mean).
    """
    target = np.asarray(target, dtype=float)
    mean_ce = float(np.mean([cross_entropy(target, b)
                             for b in branch_distributions]))
    pooled = arithmetic_mean_distribution(branch_distributions)
    return mean_ce - cross_entropy(target, pooled)
