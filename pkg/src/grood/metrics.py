"""Detection metrics: AUROC, FPR at a target TPR, score densities, and
the std-of-AUROC stability statistic.

Scores follow one orientation everywhere: higher means more OOD. AUROC is
the Mann-Whitney statistic with half credit for ties, computed by sort and
midrank in O(n log n).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._validation import as_vector
from .errors import ValidationError


def nearest_rank_quantile(values, q: float) -> float:
    """The ceil(q*n)-th order statistic (1-indexed) of ``values``.

    Deterministic for small n and always one of the observed values.
    ``q`` must lie in (0, 1]; callers treat q == 0 as "no threshold".
    """
    values = as_vector(values, "values")
    if values.size == 0:
        raise ValidationError("quantile of empty vector")
    if not 0.0 < q <= 1.0:
        raise ValidationError(f"quantile must be in (0, 1], got {q}")
    rank = math.ceil(q * values.size)
    return float(np.sort(values)[rank - 1])


def auroc(id_scores, ood_scores) -> float:
    """P(random OOD score > random ID score) + half credit for ties."""
    id_scores = as_vector(id_scores, "id_scores")
    ood_scores = as_vector(ood_scores, "ood_scores")
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValidationError("auroc requires non-empty ID and OOD scores")
    combined = np.concatenate([id_scores, ood_scores])
    ranks = rankdata(combined, method="average")
    ood_rank_sum = ranks[id_scores.size :].sum()
    n_ood = ood_scores.size
    u = ood_rank_sum - n_ood * (n_ood + 1) / 2.0
    return float(u / (id_scores.size * n_ood))


def fpr_at_tpr(id_scores, ood_scores, target_tpr: float = 0.95) -> float:
    """Fraction of OOD scores at or below the ID-score quantile threshold.

    The threshold is the nearest-rank ``target_tpr`` quantile of the ID
    scores, i.e. the lowest observed score accepting at least that
    fraction of ID data.
    """
    id_scores = as_vector(id_scores, "id_scores")
    ood_scores = as_vector(ood_scores, "ood_scores")
    if id_scores.size == 0 or ood_scores.size == 0:
        raise ValidationError("fpr_at_tpr requires non-empty ID and OOD scores")
    threshold = nearest_rank_quantile(id_scores, target_tpr)
    return float(np.mean(ood_scores <= threshold))


def score_histogram(scores, bins: int) -> list[tuple[float, float]]:
    """Equal-width density histogram over [min, max] as (center, density)
    rows; densities integrate to 1. Constant scores collapse to a single
    bin carrying all the mass.
    """
    scores = as_vector(scores, "scores")
    if bins < 1:
        raise ValidationError(f"bins must be >= 1, got {bins}")
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        return [(lo, 1.0)]
    counts, edges = np.histogram(scores, bins=bins, range=(lo, hi))
    width = edges[1] - edges[0]
    centers = (edges[:-1] + edges[1:]) / 2.0
    density = counts / (scores.size * width)
    return [(float(c), float(d)) for c, d in zip(centers, density)]


def write_histogram_csv(rows: list[tuple[float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "density"])
        for center, density in rows:
            writer.writerow([repr(center), repr(density)])


@dataclass
class EvalResult:
    """Aggregate detection metrics for one ID/OOD evaluation."""

    auroc: float
    fpr_at_tpr: float
    target_tpr: float
    n_id: int
    n_ood: int
    per_dataset: dict[str, tuple[float, float]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "fpr_at_tpr": self.fpr_at_tpr,
            "target_tpr": self.target_tpr,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
            "per_dataset": {
                name: {"auroc": a, "fpr_at_tpr": f}
                for name, (a, f) in sorted(self.per_dataset.items())
            },
        }


def evaluate_scores(id_scores, ood_scores_by_dataset: dict[str, np.ndarray],
                    target_tpr: float = 0.95) -> EvalResult:
    """Per-dataset AUROC/FPR plus the unweighted mean across datasets."""
    if not ood_scores_by_dataset:
        raise ValidationError("evaluation requires at least one OOD dataset")
    per_dataset = {}
    for name, scores in ood_scores_by_dataset.items():
        per_dataset[name] = (
            auroc(id_scores, scores),
            fpr_at_tpr(id_scores, scores, target_tpr),
        )
    aurocs = [a for a, _ in per_dataset.values()]
    fprs = [f for _, f in per_dataset.values()]
    n_ood = int(sum(len(s) for s in ood_scores_by_dataset.values()))
    return EvalResult(
        auroc=float(np.mean(aurocs)),
        fpr_at_tpr=float(np.mean(fprs)),
        target_tpr=target_tpr,
        n_id=int(len(id_scores)),
        n_ood=n_ood,
        per_dataset=per_dataset,
    )


def auroc_stability(results: list) -> float:
    """Population standard deviation of AUROC across repeated evaluations.

    Accepts EvalResult objects or raw AUROC floats; needs at least two.
    """
    values = np.array(
        [r.auroc if isinstance(r, EvalResult) else float(r) for r in results],
        dtype=np.float64,
    )
    if values.size < 2:
        raise ValidationError("stability needs at least 2 results")
    return float(np.std(values))
