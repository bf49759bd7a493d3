"""Feature exporter: dumps vision-backbone activations into the GRFD
exchange format consumed by the gradient-space OOD detector."""

from .backbones import BACKBONES, SplitBackbone, load_backbone, split_model
from .export import (
    DatasetSource,
    ExportSpec,
    export_features,
    export_mixup_ood,
    export_uniform_noise,
    forward_dataset,
)
from .grfd import TensorFile, read_grfd, write_grfd

__version__ = "0.1.0"

__all__ = [
    "BACKBONES",
    "DatasetSource",
    "ExportSpec",
    "SplitBackbone",
    "TensorFile",
    "export_features",
    "export_mixup_ood",
    "export_uniform_noise",
    "forward_dataset",
    "load_backbone",
    "read_grfd",
    "split_model",
    "write_grfd",
]
