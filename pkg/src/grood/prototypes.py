"""Class-prototype and OOD-prototype construction strategies.

Class prototypes are per-class feature means. The OOD prototype is built
from a candidate pool chosen by strategy: synthetic boundary mixup,
an auxiliary OOD set, energy-selected uniform-noise features, or simply
the mean of the class prototypes. A proximity-based quantile filter can
refine any candidate pool before averaging.

Sample means are computed by sorting each column and summing in float64,
so results are exactly invariant to the order of input rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._validation import as_matrix, require_labels
from .errors import ValidationError
from .feature_io import FeatureSet
from .metrics import nearest_rank_quantile
from .ncp import batch_distances

STRATEGIES = (
    "synthetic_mixup",
    "aux_validation",
    "uniform_energy",
    "mean_of_prototypes",
    "oracle_local",
    "oracle_global",
)


def _features_of(data) -> np.ndarray:
    return as_matrix(getattr(data, "features", data), "features")


def ordered_column_mean(rows: np.ndarray) -> np.ndarray:
    """Column means with a canonical summation order.

    Each column is sorted ascending before the float64 sum, so the result
    is bit-identical under any permutation of the input rows.
    """
    ordered = np.sort(np.asarray(rows, dtype=np.float64), axis=0)
    return ordered.sum(axis=0) / ordered.shape[0]


def class_prototypes(train, labels=None, num_classes: int | None = None) -> np.ndarray:
    """Per-class mean feature vectors, shape (num_classes, d).

    ``train`` is a FeatureSet (labels taken from it) or a feature matrix
    with ``labels`` supplied separately. Every class must have at least
    one sample; an empty class is an error naming the class index.
    """
    feats = _features_of(train)
    if labels is None:
        labels = getattr(train, "labels", None)
    if labels is None:
        raise ValidationError("class prototypes require labels")
    if num_classes is None:
        num_classes = getattr(train, "num_classes", 0) or int(np.max(labels)) + 1
    labels = require_labels(labels, feats.shape[0], num_classes)

    protos = np.empty((num_classes, feats.shape[1]), dtype=np.float64)
    for cls in range(num_classes):
        members = feats[labels == cls]
        if members.shape[0] == 0:
            raise ValidationError(f"class {cls} has no samples")
        protos[cls] = ordered_column_mean(members)
    return protos


def ood_prototype_mean(candidates) -> np.ndarray:
    """Mean of all candidate feature rows (the OOD prototype), shape (d,)."""
    feats = _features_of(candidates)
    return ordered_column_mean(feats)


def mean_of_prototypes(protos: np.ndarray) -> np.ndarray:
    """Unweighted mean of the class-prototype rows."""
    protos = as_matrix(protos, "prototypes")
    return ordered_column_mean(protos)


def proximity_keep_mask(candidates, class_protos: np.ndarray, quantile: float) -> np.ndarray:
    """Boolean mask of candidates whose nearest-class-prototype distance is
    at or above the nearest-rank ``quantile`` of those distances.

    ``quantile`` = 0 keeps everything. The retained set is never empty:
    the threshold is itself one of the observed distances.
    """
    if not 0.0 <= quantile < 1.0:
        raise ValidationError(f"filter quantile must be in [0, 1), got {quantile}")
    feats = _features_of(candidates)
    protos = as_matrix(class_protos, "class prototypes")
    if feats.shape[1] != protos.shape[1]:
        raise ValidationError(
            f"candidates have dimension {feats.shape[1]}, prototypes have {protos.shape[1]}"
        )
    nearest = batch_distances(feats, protos).min(axis=1)
    if quantile == 0.0:
        return np.ones(feats.shape[0], dtype=bool)
    threshold = nearest_rank_quantile(nearest, quantile)
    mask = nearest >= threshold
    assert mask.any(), "proximity filter removed every candidate"
    return mask


def proximity_filter(candidates, class_protos: np.ndarray, quantile: float):
    """Drop candidates that sit too close to the class prototypes.

    Returns the same container type it was given (FeatureSet in,
    FeatureSet out; matrix in, matrix out).
    """
    mask = proximity_keep_mask(candidates, class_protos, quantile)
    kept = np.where(mask)[0]
    if isinstance(candidates, FeatureSet):
        return candidates.restrict(kept)
    return _features_of(candidates)[kept]


def energy_scores(logits, temperature: float = 1.0) -> np.ndarray:
    """Per-row energy -T * log sum_j exp(logit_j / T)."""
    logits = as_matrix(logits, "logits")
    if temperature <= 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    return -temperature * logsumexp(logits / temperature, axis=1)


def select_by_energy(candidates, count: int, temperature: float = 1.0,
                     order: str = "lowest", logits=None):
    """Keep the ``count`` candidates with the lowest (default) energy.

    Ties break toward the lower row index. ``order="highest"`` flips the
    selection for callers who want the opposite end of the energy range.
    """
    if isinstance(candidates, FeatureSet):
        if logits is None:
            logits = candidates.logits
        n = candidates.n
    else:
        n = _features_of(candidates).shape[0]
    if logits is None:
        raise ValidationError("energy selection requires logits")
    if not 1 <= count <= n:
        raise ValidationError(f"selection count must be in [1, {n}], got {count}")
    if order not in ("lowest", "highest"):
        raise ValidationError(f"energy order must be 'lowest' or 'highest', got {order!r}")

    energy = energy_scores(logits, temperature)
    if order == "highest":
        energy = -energy
    chosen = np.sort(np.argsort(energy, kind="stable")[:count])
    if isinstance(candidates, FeatureSet):
        return candidates.restrict(chosen)
    return _features_of(candidates)[chosen]


def runner_up_from_logits(logits) -> np.ndarray:
    """Index of the second-highest logit per row (ties to the lower index)."""
    logits = as_matrix(logits, "logits")
    if logits.shape[1] < 2:
        raise ValidationError("runner-up class needs at least 2 classes")
    return np.argsort(-logits, axis=1, kind="stable")[:, 1]


def runner_up_from_distances(features, protos: np.ndarray) -> np.ndarray:
    """Index of the second-nearest class prototype per row.

    Fallback ranking for candidate pools that carry no logits.
    """
    feats = _features_of(features)
    protos = as_matrix(protos, "prototypes")
    if protos.shape[0] < 2:
        raise ValidationError("runner-up class needs at least 2 classes")
    dists = batch_distances(feats, protos)
    return np.argsort(dists, axis=1, kind="stable")[:, 1]


@dataclass(frozen=True)
class MixupResult:
    """Interpolated features plus the mid-network mode they passed through.

    ``mid_mode`` is "identity" when no mid network was applied (the
    interpolation itself is the output) and names the external transform
    otherwise.
    """

    features: np.ndarray
    mid_mode: str
    lam: float


def feature_space_mixup(features, protos: np.ndarray, second_class, lam: float,
                        mid_mode: str = "identity") -> MixupResult:
    """Interpolate each feature row toward a target class prototype:

        lam * feature + (1 - lam) * protos[second_class]

    ``second_class`` should hold the runner-up predicted class per row;
    rows whose target equals their nearest prototype are permitted but
    warned about. Any mid-network transform is applied by the caller; this
    function tags the result with the mode used.
    """
    feats = _features_of(features)
    protos = as_matrix(protos, "prototypes")
    if feats.shape[1] != protos.shape[1]:
        raise ValidationError(
            f"features have dimension {feats.shape[1]}, prototypes have {protos.shape[1]}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixup lambda must be in [0, 1], got {lam}")
    targets = require_labels(second_class, feats.shape[0], protos.shape[0], "second_class")

    nearest = np.argmin(batch_distances(feats, protos), axis=1)
    clashes = int((targets == nearest).sum())
    if clashes:
        warnings.warn(
            f"{clashes} mixup target(s) equal the nearest class; "
            "interpolation toward the runner-up is intended",
            UserWarning,
            stacklevel=2,
        )
    mixed = lam * feats + (1.0 - lam) * protos[targets]
    return MixupResult(features=mixed, mid_mode=mid_mode, lam=float(lam))


def synthetic_mixup_candidates(features, protos: np.ndarray, lam: float = 0.5,
                               logits=None) -> MixupResult:
    """Boundary-adjacent synthetic candidates: each row interpolated toward
    its runner-up class prototype (from logits when available, otherwise
    from prototype distances)."""
    if logits is not None:
        targets = runner_up_from_logits(logits)
    else:
        targets = runner_up_from_distances(features, protos)
    return feature_space_mixup(features, protos, targets, lam)


# Per-strategy default for the proximity filter when the caller passes
# "auto": only the synthetic pool is filtered; candidate sets that are
# already real OOD data are averaged as-is.
_AUTO_FILTER = {"synthetic_mixup": 0.5}


def resolve_filter_quantile(strategy: str, filter_quantile) -> float | None:
    """"auto" applies per-strategy defaults, "none"/None disables the
    filter, a number is used as-is."""
    if filter_quantile == "auto":
        return _AUTO_FILTER.get(strategy)
    if filter_quantile == "none" or filter_quantile is None:
        return None
    quantile = float(filter_quantile)
    if not 0.0 <= quantile < 1.0:
        raise ValidationError(f"filter quantile must be in [0, 1), got {quantile}")
    return quantile


def build_ood_prototype(
    strategy: str,
    class_protos: np.ndarray,
    *,
    id_features=None,
    id_logits=None,
    candidates=None,
    candidate_logits=None,
    filter_quantile="auto",
    mixup_lam: float = 0.5,
    energy_count: int | None = 100,
    temperature: float = 1.0,
    energy_order: str = "lowest",
) -> tuple[np.ndarray, dict]:
    """Construct the OOD prototype for one of the practical strategies.

    Returns the prototype vector and an info dict recording the candidate
    pool size, the filter quantile actually applied, and the mixup mode
    where relevant. Oracle strategies need dataset splits and live in the
    pipeline, not here.
    """
    class_protos = as_matrix(class_protos, "class prototypes")
    quantile = resolve_filter_quantile(strategy, filter_quantile)
    info: dict = {"strategy": strategy, "filter_quantile": quantile}

    if strategy == "mean_of_prototypes":
        return mean_of_prototypes(class_protos), info

    if strategy == "synthetic_mixup":
        if id_features is None:
            raise ValidationError("synthetic_mixup requires in-distribution features")
        mixed = synthetic_mixup_candidates(id_features, class_protos, mixup_lam, id_logits)
        pool = mixed.features
        info["mid_mode"] = mixed.mid_mode
        info["mixup_lam"] = mixed.lam
    elif strategy == "aux_validation":
        if candidates is None:
            raise ValidationError("aux_validation requires an auxiliary OOD candidate set")
        pool = _features_of(candidates)
    elif strategy == "uniform_energy":
        if candidates is None:
            raise ValidationError("uniform_energy requires a candidate set")
        logits = candidate_logits
        if logits is None:
            logits = getattr(candidates, "logits", None)
        if logits is None:
            raise ValidationError("uniform_energy requires candidate logits")
        pool = _features_of(candidates)
        count = pool.shape[0] if energy_count is None else min(energy_count, pool.shape[0])
        pool = select_by_energy(pool, count, temperature, energy_order, logits=logits)
        info["energy_count"] = count
        info["energy_order"] = energy_order
    else:
        raise ValidationError(f"unknown or pipeline-only strategy {strategy!r}")

    info["pool_size"] = int(pool.shape[0])
    if quantile is not None and quantile > 0:
        pool = proximity_filter(pool, class_protos, quantile)
        info["kept_size"] = int(pool.shape[0])
    return ood_prototype_mean(pool), info
