"""
Evaluation-side metrics for binary segmentation: confusion counts at a
softmax threshold, overlap scores, calibration scores (NLL, Brier),
softmax histograms, bootstrap confidence intervals and the Wilcoxon
rank-sum test.

All functions are pure; per-image work can be fanned out and reduced.
"""
import itertools
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from autodiff import ShapeError, Tensor, tensor

logger = logging.getLogger(__name__)

NLL_CLIP = 1e-7
METRIC_NAMES = ("nll", "brier", "dice", "jaccard", "recall", "precision")
SIGNIFICANCE_LEVEL = 0.05
EXACT_RANK_SUM_LIMIT = 12


@dataclass(frozen=True)
class PredictionMap:
    """Foreground softmax values s in [0, 1] over an image, with its binary truth."""
    fg_prob: Tensor
    truth: Tensor

    def __post_init__(self):
        fg_prob, truth = tensor(self.fg_prob), tensor(self.truth)
        if fg_prob.shape != truth.shape or fg_prob.ndim != 2:
            raise ShapeError(f"expected matching [H,W] maps, got {fg_prob.shape} and {truth.shape}")
        if fg_prob.min() < 0.0 or fg_prob.max() > 1.0:
            raise ValueError("fg_prob must lie in [0, 1]")
        if not np.all((truth == 0.0) | (truth == 1.0)):
            raise ValueError("truth must be binary {0, 1}")
        object.__setattr__(self, "fg_prob", fg_prob)
        object.__setattr__(self, "truth", truth)

    @property
    def n_pixels(self) -> int:
        return int(self.truth.size)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def predicted_positive(self) -> int:
        return self.tp + self.fp


#=========================================== THRESHOLDING ===========================================

def confusion(pred_map: PredictionMap, threshold: float = 0.5) -> ConfusionCounts:
    """
    Hard mask from s >= threshold, tallied against the truth.

    threshold = 0.5 is the argmax rule for two classes; higher thresholds
    favour precision and lower ones recall.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    predicted = pred_map.fg_prob >= threshold
    truth = pred_map.truth == 1.0
    return ConfusionCounts(
        tp=int(np.count_nonzero(predicted & truth)),
        fp=int(np.count_nonzero(predicted & ~truth)),
        fn=int(np.count_nonzero(~predicted & truth)),
        tn=int(np.count_nonzero(~predicted & ~truth)),
    )


def _ratio(numerator: float, denominator: float, complementary_errors: int) -> float:
    # Nothing to find and nothing wrongly found counts as a perfect score.
    if denominator == 0:
        return 1.0 if complementary_errors == 0 else 0.0
    return numerator / denominator


def dice(counts: ConfusionCounts) -> float:
    return _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, counts.fp + counts.fn)


def jaccard(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp + counts.fn, counts.fp + counts.fn)


def recall(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fn, counts.fp)


def precision(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp, counts.fn)


def f_measure(precision_value: float, recall_value: float) -> float:
    """Harmonic mean of precision and recall; the same number as Dice on the counts they came from."""
    total = precision_value + recall_value
    return 0.0 if total == 0 else 2.0 * precision_value * recall_value / total


#=========================================== CALIBRATION ===========================================

def nll(pred_map: PredictionMap) -> float:
    """Binary negative log likelihood with s clipped to [1e-7, 1 - 1e-7]."""
    s = np.clip(pred_map.fg_prob, NLL_CLIP, 1.0 - NLL_CLIP)
    y = pred_map.truth
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


def brier(pred_map: PredictionMap) -> float:
    """Squared error against the one-hot truth, averaged over both classes and all pixels."""
    s, y = pred_map.fg_prob, pred_map.truth
    foreground = (y - s) ** 2
    background = ((1.0 - y) - (1.0 - s)) ** 2
    return float((foreground.mean() + background.mean()) / 2.0)


def softmax_histogram(pred_map: PredictionMap, n_bins: int = 20) -> List[Tuple[int, int]]:
    """
    Counts of s in n_bins uniform bins over [0, 1]; bins are left-inclusive
    and the last one also holds s == 1.

    Returns:
        list: (bin index, pixel count) pairs.
    """
    if n_bins < 2:
        raise ValueError(f"n_bins must be >= 2, got {n_bins}")
    counts, _ = np.histogram(pred_map.fg_prob, bins=n_bins, range=(0.0, 1.0))
    return [(i, int(c)) for i, c in enumerate(counts)]


def uncertain_fraction(pred_map: PredictionMap, low: float = 0.05, high: float = 0.95) -> float:
    """Share of pixels whose foreground probability is strictly inside (low, high)."""
    s = pred_map.fg_prob
    return float(np.count_nonzero((s > low) & (s < high)) / s.size)


#=========================================== STATISTICS ===========================================

def bootstrap_ci(
    values: Sequence[float],
    level: float = 0.95,
    n_resamples: int = 10000,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Percentile bootstrap interval of the mean.

    Parameters:
        values: Per-image values, at least 2.
        level (float): Coverage, e.g. 0.95.
        n_resamples (int): Number of bootstrap resamples.
        seed (int): Seed; equal seeds give equal intervals.

    Returns:
        tuple: (low, high), both attained resample means.
    """
    data = np.asarray(values, dtype=np.float64)
    if data.size < 2:
        raise ValueError(f"bootstrap_ci needs at least 2 values, got {data.size}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, data.size, size=(n_resamples, data.size))
    means = data[picks].mean(axis=1)
    tail = (1.0 - level) / 2.0
    low = np.quantile(means, tail, method="lower")
    high = np.quantile(means, 1.0 - tail, method="higher")
    return float(low), float(high)


def wilcoxon_rank_sum(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float]:
    """
    Two-sided Wilcoxon rank-sum test with midranks for ties.

    Small samples (12 values or fewer in total) get the exact p-value by
    enumerating every assignment of the pooled ranks; larger ones use the
    normal approximation with tie and continuity corrections.

    Returns:
        tuple: (rank sum of xs, two-sided p-value).
    """
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.size < 3 or ys.size < 3:
        raise ValueError(f"rank-sum test needs at least 3 values per sample, got {xs.size} and {ys.size}")
    n, m = xs.size, ys.size
    total = n + m
    ranks = stats.rankdata(np.concatenate([xs, ys]))
    statistic = float(ranks[:n].sum())
    expected = n * (total + 1) / 2.0
    observed = abs(statistic - expected)

    if total <= EXACT_RANK_SUM_LIMIT:
        sums = np.array([ranks[list(idx)].sum() for idx in itertools.combinations(range(total), n)])
        p_value = float(np.mean(np.abs(sums - expected) >= observed - 1e-9))
        return statistic, min(1.0, p_value)

    _, tie_sizes = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_sizes ** 3 - tie_sizes)) / (total * (total - 1))
    variance = n * m / 12.0 * ((total + 1) - tie_term)
    if variance <= 0:
        return statistic, 1.0
    z = max(observed - 0.5, 0.0) / np.sqrt(variance)
    return statistic, float(min(1.0, 2.0 * stats.norm.sf(z)))


def significance_matrix(per_condition: Mapping[str, Sequence[float]], metric: str) -> pd.DataFrame:
    """Pairwise rank-sum tests between every two conditions for one metric."""
    rows = []
    for a, b in itertools.combinations(per_condition, 2):
        statistic, p_value = wilcoxon_rank_sum(per_condition[a], per_condition[b])
        rows.append({
            "metric": metric,
            "loss_a": a,
            "loss_b": b,
            "statistic": statistic,
            "p_value": p_value,
            "significant": p_value < SIGNIFICANCE_LEVEL,
        })
    return pd.DataFrame(rows, columns=["metric", "loss_a", "loss_b", "statistic", "p_value", "significant"])


#=========================================== REPORTS ===========================================

@dataclass
class MetricsReport:
    """Mean metrics over a set of images, their bootstrap CIs and the per-image values."""
    nll: float
    brier: float
    dice: float
    jaccard: float
    recall: float
    precision: float
    per_image: Dict[str, np.ndarray] = field(default_factory=dict)
    ci: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def to_row(self, **labels) -> Dict[str, object]:
        """labels first, then the six means, then <metric>_lo/<metric>_hi pairs."""
        row: Dict[str, object] = dict(labels)
        for name in METRIC_NAMES:
            row[name] = getattr(self, name)
        for name in METRIC_NAMES:
            low, high = self.ci.get(name, (np.nan, np.nan))
            row[f"{name}_lo"] = low
            row[f"{name}_hi"] = high
        return row


def image_metrics(pred_map: PredictionMap, threshold: float = 0.5) -> Dict[str, float]:
    counts = confusion(pred_map, threshold)
    return {
        "nll": nll(pred_map),
        "brier": brier(pred_map),
        "dice": dice(counts),
        "jaccard": jaccard(counts),
        "recall": recall(counts),
        "precision": precision(counts),
    }


def evaluate(
    maps: Iterable[PredictionMap],
    threshold: float = 0.5,
    n_resamples: int = 10000,
    seed: int = 0,
    level: float = 0.95,
) -> MetricsReport:
    """
    Per-image metrics at threshold, averaged over images, with bootstrap CIs.

    Parameters:
        maps: Prediction maps, one per test image.
        threshold (float): Softmax threshold for the hard-mask metrics.
        n_resamples (int): Bootstrap resamples per metric.
        seed (int): Bootstrap seed.
        level (float): CI coverage.

    Returns:
        MetricsReport: Means, CIs and per-image arrays.
    """
    per_image = [image_metrics(m, threshold) for m in maps]
    if not per_image:
        raise ValueError("evaluate needs at least one prediction map")
    columns = {name: np.array([row[name] for row in per_image]) for name in METRIC_NAMES}
    ci = {}
    if len(per_image) >= 2:
        ci = {name: bootstrap_ci(values, level, n_resamples, seed) for name, values in columns.items()}
    else:
        logger.warning("only one image evaluated; confidence intervals left empty")
    means = {name: float(values.mean()) for name, values in columns.items()}
    return MetricsReport(**means, per_image=columns, ci=ci)


def write_rows_csv(
    rows: Sequence[Mapping[str, object]],
    path: str,
    columns: Optional[Sequence[str]] = None,
    append: bool = False,
) -> None:
    """Writes rows to a CSV with 6 significant digits; when appending, the header goes out only once."""
    frame = pd.DataFrame(list(rows), columns=columns)
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    frame.to_csv(path, mode="a" if exists else "w", header=not exists, index=False, float_format="%.6g")
