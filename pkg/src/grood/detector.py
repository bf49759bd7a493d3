"""Scikit-learn style estimator wrapping the full detection pipeline.

``GroodDetector.fit`` consumes penultimate-layer features with class
labels, builds prototypes and the gradient corpus, and calibrates a
threshold. Scoring follows both conventions:

* :meth:`ood_scores` uses the toolkit orientation (higher = more OOD);
* :meth:`score_samples` / :meth:`decision_function` / :meth:`predict`
  follow the scikit-learn outlier API (higher = more normal, predictions
  in {+1 inlier, -1 outlier}), so the detector composes with pipelines
  and model-selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from . import index as gindex
from .errors import ValidationError
from .ncp import NcpModel, class_prototype_gradients, gradient_map
from .prototypes import STRATEGIES, build_ood_prototype, class_prototypes

SCORE_VARIANTS = (
    "grood",
    "distance_to_ood_prototype",
    "gradient_l1_norm",
    "grads_wrt_class_prototypes",
)

_CORPUS_VARIANTS = frozenset({"grood", "grads_wrt_class_prototypes"})


def variant_query_vectors(model: NcpModel, features: np.ndarray, variant: str) -> np.ndarray:
    """Map features to the vectors searched or measured by a score variant."""
    if variant in ("grood", "gradient_l1_norm"):
        return gradient_map(features, model).gradients
    if variant == "grads_wrt_class_prototypes":
        return class_prototype_gradients(features, model)
    raise ValidationError(f"variant {variant!r} has no query vectors")


def variant_scores(model: NcpModel, search_index, features, variant: str,
                   nprobe: int | None = None, k: int | None = None,
                   exclude_self: bool = False) -> np.ndarray:
    """Per-sample OOD scores for one variant, higher = more OOD.

    Index-backed variants report nearest-neighbor distances in their
    gradient space. The distance variant negates the Euclidean distance to
    the OOD prototype (closer to the OOD reference = more OOD). The L1
    variant reports the raw gradient L1 norm, which grows with the OOD
    softmax probability.
    """
    features = check_array(features, dtype=np.float64)
    if variant == "distance_to_ood_prototype":
        diff = features - model.ood_prototype[None, :]
        return -np.sqrt(np.einsum("nd,nd->n", diff, diff))
    if variant == "gradient_l1_norm":
        grads = variant_query_vectors(model, features, variant)
        return np.abs(grads).sum(axis=1)
    if variant in _CORPUS_VARIANTS:
        if search_index is None:
            raise ValidationError(f"variant {variant!r} requires a fitted index")
        queries = variant_query_vectors(model, features, variant)
        if exclude_self:
            exclude = np.arange(queries.shape[0], dtype=np.int64)
            return gindex.score_batch(search_index, queries, nprobe=nprobe, k=k,
                                      exclude_ids=exclude)
        return gindex.score_batch(search_index, queries, nprobe=nprobe, k=k)
    raise ValidationError(f"unknown score variant {variant!r}")


class GroodDetector(BaseEstimator, OutlierMixin):
    """Out-of-distribution detector scored in OOD-prototype gradient space.

    Parameters
    ----------
    strategy : one of "synthetic_mixup", "aux_validation", "uniform_energy",
        "mean_of_prototypes". How the OOD prototype is built at fit time.
    filter_quantile : "auto", None, or float in [0, 1). Proximity filter
        applied to the candidate pool; "auto" filters only the synthetic
        pool at 0.5.
    mixup_lam : interpolation weight for the synthetic strategy.
    energy_count, temperature, energy_order : energy-selection parameters
        for the "uniform_energy" strategy.
    index : "exact" or "ivf".
    nlist : IVF cell count, default round(sqrt(n)) capped at 4096.
    nprobe, k : probe count and neighbor rank at query time.
    target_tpr : ID acceptance rate used to calibrate the threshold.
    variant : score variant; "grood" is the gradient nearest-neighbor score.
    seed : seed for the IVF k-means.
    """

    def __init__(self, strategy="synthetic_mixup", filter_quantile="auto",
                 mixup_lam=0.5, energy_count=100, temperature=1.0,
                 energy_order="lowest", index="exact", nlist=None, nprobe=8,
                 k=1, target_tpr=0.95, variant="grood", seed=0):
        self.strategy = strategy
        self.filter_quantile = filter_quantile
        self.mixup_lam = mixup_lam
        self.energy_count = energy_count
        self.temperature = temperature
        self.energy_order = energy_order
        self.index = index
        self.nlist = nlist
        self.nprobe = nprobe
        self.k = k
        self.target_tpr = target_tpr
        self.variant = variant
        self.seed = seed

    def fit(self, X, y, ood_candidates=None, candidate_logits=None, logits=None):
        """Fit prototypes, the gradient corpus, the index, and the threshold.

        ``y`` holds class labels (any hashable values; encoded internally).
        ``ood_candidates`` supplies the candidate pool for the
        "aux_validation" and "uniform_energy" strategies; ``logits`` are
        classifier logits for the training rows (optional, used to rank
        runner-up classes for mixup).
        """
        X = check_array(X, dtype=np.float64)
        y = column_or_1d(y)
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if self.variant not in SCORE_VARIANTS:
            raise ValidationError(f"unknown score variant {self.variant!r}")

        self.classes_, encoded = np.unique(y, return_inverse=True)
        protos = class_prototypes(X, encoded, len(self.classes_))
        ood_proto, info = build_ood_prototype(
            self.strategy,
            protos,
            id_features=X,
            id_logits=logits,
            candidates=ood_candidates,
            candidate_logits=candidate_logits,
            filter_quantile=self.filter_quantile,
            mixup_lam=self.mixup_lam,
            energy_count=self.energy_count,
            temperature=self.temperature,
            energy_order=self.energy_order,
        )
        self.model_ = NcpModel(prototypes=protos, ood_prototype=ood_proto)
        self.fit_info_ = info

        self.index_ = None
        if self.variant in _CORPUS_VARIANTS:
            corpus = variant_query_vectors(self.model_, X, self.variant)
            nlist = self.nlist
            if self.index == "ivf":
                if nlist is None:
                    nlist = gindex.default_nlist(corpus.shape[0])
                self.index_ = gindex.build_ivf(corpus, nlist, seed=self.seed,
                                               nprobe=self.nprobe, k=self.k)
            elif self.index == "exact":
                self.index_ = gindex.build_exact(corpus)
            else:
                raise ValidationError(f"unknown index mode {self.index!r}")

        # Calibrate on the training data itself; corpus-backed variants
        # mask the self-match so the calibration scores are not all zero.
        if self.variant in _CORPUS_VARIANTS and X.shape[0] >= 2:
            calib = variant_scores(self.model_, self.index_, X, self.variant,
                                   k=self.k, exclude_self=True)
        else:
            calib = variant_scores(self.model_, self.index_, X, self.variant, k=self.k)
        self.threshold_ = gindex.calibrate_threshold(calib, self.target_tpr)
        self.offset_ = -self.threshold_
        self.n_features_in_ = X.shape[1]
        return self

    def calibrate(self, id_scores) -> "GroodDetector":
        """Recalibrate the threshold from held-out ID scores
        (toolkit orientation, as returned by :meth:`ood_scores`)."""
        check_is_fitted(self, "model_")
        self.threshold_ = gindex.calibrate_threshold(id_scores, self.target_tpr)
        self.offset_ = -self.threshold_
        return self

    def ood_scores(self, X) -> np.ndarray:
        """Scores in the toolkit orientation: higher = more OOD."""
        check_is_fitted(self, "model_")
        return variant_scores(self.model_, self.index_, X, self.variant,
                              nprobe=self.nprobe, k=self.k)

    def score_samples(self, X) -> np.ndarray:
        """Scikit-learn orientation: higher = more normal."""
        return -self.ood_scores(X)

    def decision_function(self, X) -> np.ndarray:
        """Positive for inliers; zero exactly at the calibrated threshold."""
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        """+1 for ID (score <= threshold, boundary inclusive), -1 for OOD."""
        return np.where(self.decision_function(X) >= 0, 1, -1)
