"""Gradient-space out-of-distribution detection.

Builds class prototypes and an artificial OOD prototype from exported
feature embeddings, turns each sample into a closed-form loss gradient
with respect to the OOD prototype, and scores samples by nearest-neighbor
distance in that gradient space.
"""

from .detector import GroodDetector
from .errors import (
    ChecksumError,
    ConfigError,
    FormatError,
    GroodError,
    ManifestError,
    NotFittedError,
    TruncationError,
    ValidationError,
)
from .feature_io import (
    FeatureSet,
    Manifest,
    ManifestRecord,
    load_manifest,
    read_feature_set,
    save_manifest,
    validate_manifest,
    write_feature_set,
)
from .index import (
    GradientIndex,
    ScoreReport,
    build_exact,
    build_ivf,
    calibrate_threshold,
    classify,
    score,
    score_batch,
)
from .metrics import EvalResult, auroc, auroc_stability, fpr_at_tpr, score_histogram
from .ncp import (
    GradientMap,
    NcpModel,
    class_prototype_gradients,
    gradient_map,
    ncp_logits,
    ncp_loss,
    ncp_predict,
    ncp_softmax,
    ood_prototype_gradient,
)
from .prototypes import (
    class_prototypes,
    feature_space_mixup,
    mean_of_prototypes,
    ood_prototype_mean,
    proximity_filter,
    select_by_energy,
)

__version__ = "0.1.0"

__all__ = [
    "ChecksumError",
    "ConfigError",
    "EvalResult",
    "FeatureSet",
    "FormatError",
    "GradientIndex",
    "GradientMap",
    "GroodDetector",
    "GroodError",
    "Manifest",
    "ManifestError",
    "ManifestRecord",
    "NcpModel",
    "NotFittedError",
    "ScoreReport",
    "TruncationError",
    "ValidationError",
    "auroc",
    "auroc_stability",
    "build_exact",
    "build_ivf",
    "calibrate_threshold",
    "class_prototype_gradients",
    "class_prototypes",
    "classify",
    "feature_space_mixup",
    "fpr_at_tpr",
    "gradient_map",
    "load_manifest",
    "mean_of_prototypes",
    "ncp_logits",
    "ncp_loss",
    "ncp_predict",
    "ncp_softmax",
    "ood_prototype_gradient",
    "ood_prototype_mean",
    "proximity_filter",
    "read_feature_set",
    "save_manifest",
    "score",
    "score_batch",
    "score_histogram",
    "select_by_energy",
    "validate_manifest",
    "write_feature_set",
]
