"""Decision thresholding, confusion-matrix accounting, and verification metrics.

The positive class is "genuine" throughout. A report row serializes as CSV
`loss,k,n,threshold,accuracy,recall,precision,specificity,f1` with k fixed
at 2 and three decimals per value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, sample_pairs
from .model import SiameseParams, probability_values
from .training import K_WAY, pair_distances


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float
    recall: float
    precision: float
    specificity: float
    f1: float
    threshold: float
    n: int = 0
    loss: str = ""
    degenerate: bool = False

    def csv_row(self) -> str:
        return (
            f"{self.loss},{K_WAY},{self.n},{self.threshold:.3f},{self.accuracy:.3f},"
            f"{self.recall:.3f},{self.precision:.3f},{self.specificity:.3f},{self.f1:.3f}"
        )


CSV_HEADER = "loss,k,n,threshold,accuracy,recall,precision,specificity,f1"


def metrics_csv(reports) -> str:
    lines = [CSV_HEADER]
    lines.extend(r.csv_row() for r in reports)
    return "\n".join(lines) + "\n"


def classify(p: float, threshold: float = 0.5) -> bool:
    """Genuine iff p >= threshold (boundary counts as genuine)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return p >= threshold


def confusion(predictions, labels) -> ConfusionCounts:
    preds = np.asarray(predictions, dtype=bool)
    labs = np.asarray(labels, dtype=bool)
    if preds.shape != labs.shape or preds.ndim != 1:
        raise ValueError(f"prediction/label mismatch: {preds.shape} vs {labs.shape}")
    return ConfusionCounts(
        tp=int(np.sum(preds & labs)),
        tn=int(np.sum(~preds & ~labs)),
        fp=int(np.sum(preds & ~labs)),
        fn=int(np.sum(~preds & labs)),
    )


def metrics(
    counts: ConfusionCounts, *, threshold: float = 0.5, n: int = 0, loss: str = ""
) -> MetricsReport:
    """The five confusion-matrix metrics; zero-denominator entries report 0
    and set the degenerate flag rather than failing (sweeps hit such corners).
    """
    if counts.total == 0:
        raise ValueError("metrics of an empty confusion matrix")
    degenerate = False

    def ratio(num: int, den: int) -> float:
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    return MetricsReport(
        counts=counts,
        accuracy=(counts.tp + counts.tn) / counts.total,
        recall=ratio(counts.tp, counts.tp + counts.fn),
        precision=ratio(counts.tp, counts.tp + counts.fp),
        specificity=ratio(counts.tn, counts.tn + counts.fp),
        f1=ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn),
        threshold=threshold,
        n=n,
        loss=loss,
        degenerate=degenerate,
    )


def _pair_probabilities(params: SiameseParams, pairs) -> tuple[np.ndarray, np.ndarray]:
    d = pair_distances(params, pairs)
    p = probability_values(d, params.theta0.item(), params.theta1.item())
    genuine = np.array([pair.genuine for pair in pairs])
    return p, genuine


def evaluate(
    params: SiameseParams,
    test: Dataset,
    pairs_per_class: int = 500,
    threshold: float = 0.5,
    seed: int = 0,
    n: int = 0,
    loss: str = "",
) -> MetricsReport:
    """Score a balanced, seeded query-pair set from the test split."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    pairs = sample_pairs(test, pairs_per_class, np.random.default_rng(seed))
    p, genuine = _pair_probabilities(params, pairs)
    counts = confusion(p >= threshold, genuine)
    return metrics(counts, threshold=threshold, n=n, loss=loss)


def threshold_sweep(
    params: SiameseParams,
    test: Dataset,
    thresholds,
    pairs_per_class: int = 500,
    seed: int = 0,
    n: int = 0,
    loss: str = "",
) -> list[MetricsReport]:
    """One report per threshold over a single fixed pair set and embedding pass."""
    grid = [float(t) for t in thresholds]
    if not grid:
        raise ValueError("empty threshold grid")
    for t in grid:
        if not 0.0 < t < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {t}")
    pairs = sample_pairs(test, pairs_per_class, np.random.default_rng(seed))
    p, genuine = _pair_probabilities(params, pairs)
    return [
        metrics(confusion(p >= t, genuine), threshold=t, n=n, loss=loss) for t in grid
    ]
