"""Batch export of backbone activations into GRFD files.

Three operations: plain feature dumps per (dataset, layer), synthetic
OOD generation by interpolating early activations toward the runner-up
class prototype and pushing the mixture through the mid network, and
uniform-noise probes. All passes run in evaluation mode without gradient
tracking over a fixed batch order, so repeated exports are bit-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, TensorDataset
from torchvision import datasets as tv_datasets
from torchvision import transforms

from .backbones import SplitBackbone, load_backbone
from .grfd import TensorFile, file_checksum, write_grfd, write_manifest

ID_ROLES = frozenset({"id_train", "id_test"})
ROLES = ("id_train", "id_test", "ood_aux", "ood_test", "synthetic_ood")


@dataclass
class ExportSpec:
    """Everything one export run needs."""

    backbone: str = "toy_cnn"
    checkpoint: str | None = None
    num_classes: int = 4
    image_size: int = 32
    batch_size: int = 64
    device: str = "cpu"
    out_dir: str = "."
    mixup_lam: float = 0.5
    noise_count: int = 100
    seed: int = 0
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)


@dataclass
class DatasetSource:
    """One dataset to export: an image-folder root or in-memory tensors.

    Tensor inputs are assumed preprocessed (normalized, sized); folder
    inputs go through resize + normalize built from the spec.
    """

    name: str
    role: str
    root: str | None = None
    images: torch.Tensor | None = None
    labels: torch.Tensor | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if (self.root is None) == (self.images is None):
            raise ValueError("provide exactly one of root= or images=")


def build_transform(spec: ExportSpec):
    return transforms.Compose([
        transforms.Resize((spec.image_size, spec.image_size)),
        transforms.ToTensor(),
        transforms.Normalize(spec.mean, spec.std),
    ])


def _dataset(spec: ExportSpec, source: DatasetSource) -> Dataset:
    if source.root is not None:
        return tv_datasets.ImageFolder(source.root, transform=build_transform(spec))
    if source.labels is not None:
        return TensorDataset(source.images, source.labels)
    return TensorDataset(source.images)


def _loader(spec: ExportSpec, source: DatasetSource) -> DataLoader:
    return DataLoader(_dataset(spec, source), batch_size=spec.batch_size,
                      shuffle=False, num_workers=0)


@dataclass
class ForwardDump:
    early: np.ndarray
    early_shape: tuple
    penultimate: np.ndarray
    logits: np.ndarray
    labels: np.ndarray | None = None


def forward_dataset(split: SplitBackbone, loader: DataLoader,
                    device: str = "cpu") -> ForwardDump:
    """Run every batch through early -> mid -> head, flattening early
    activations for the file boundary."""
    early_parts, pen_parts, logit_parts, label_parts = [], [], [], []
    early_shape = None
    with torch.no_grad():
        for batch in loader:
            if isinstance(batch, (list, tuple)):
                x = batch[0]
                y = batch[1] if len(batch) > 1 else None
            else:
                x, y = batch, None
            e = split.early(x.to(device))
            early_shape = tuple(e.shape[1:])
            pen = split.mid(e)
            logits = split.head(pen)
            early_parts.append(e.reshape(e.shape[0], -1).cpu().numpy())
            pen_parts.append(pen.cpu().numpy())
            logit_parts.append(logits.cpu().numpy())
            if y is not None:
                label_parts.append(np.asarray(y))
    if not early_parts:
        raise ValueError("dataset is empty")
    return ForwardDump(
        early=np.concatenate(early_parts),
        early_shape=early_shape,
        penultimate=np.concatenate(pen_parts),
        logits=np.concatenate(logit_parts),
        labels=np.concatenate(label_parts) if label_parts else None,
    )


def _record(path: str, layer: str, role: str, count: int, out_dir: str) -> dict:
    return {
        "path": path,
        "layer": layer,
        "role": role,
        "count": count,
        "checksum": file_checksum(os.path.join(out_dir, path)),
    }


def _spec_backbone(spec: ExportSpec) -> SplitBackbone:
    # seed construction so checkpoint-less (randomly initialized) backbones
    # are identical across repeated runs of the same spec
    torch.manual_seed(spec.seed)
    split = load_backbone(spec.backbone, spec.num_classes, spec.checkpoint)
    try:
        split.early_shape(spec.image_size)
    except (RuntimeError, AssertionError, ValueError) as exc:
        raise ValueError(
            f"backbone {spec.backbone!r} rejects {spec.image_size}x"
            f"{spec.image_size} inputs: {exc}"
        ) from exc
    return split


def export_features(spec: ExportSpec, sources: list[DatasetSource],
                    early_roles: tuple = ("id_train",),
                    split: SplitBackbone | None = None) -> str:
    """Dump one penultimate file (with logits) per dataset, plus an early
    file for the roles in ``early_roles``; write the manifest. Labels ride
    along for ID roles only. Returns the manifest path."""
    if split is None:
        split = _spec_backbone(spec)
    split.to(spec.device)
    os.makedirs(spec.out_dir, exist_ok=True)

    records = []
    dims = {}
    for source in sources:
        dump = forward_dataset(split, _loader(spec, source), spec.device)
        labels = dump.labels if source.role in ID_ROLES else None
        if source.role == "id_train" and labels is None:
            raise ValueError(f"dataset {source.name!r} needs labels for id_train")

        pen_name = f"{source.name}_penultimate.grfd"
        write_grfd(TensorFile(layer="penultimate", features=dump.penultimate,
                              labels=labels, logits=dump.logits,
                              dataset_id=source.name,
                              num_classes=split.num_classes),
                   os.path.join(spec.out_dir, pen_name))
        records.append(_record(pen_name, "penultimate", source.role,
                               len(dump.penultimate), spec.out_dir))
        dims["penultimate"] = dump.penultimate.shape[1]

        if source.role in early_roles:
            early_name = f"{source.name}_early.grfd"
            write_grfd(TensorFile(layer="early", features=dump.early,
                                  labels=labels, dataset_id=source.name,
                                  num_classes=split.num_classes),
                       os.path.join(spec.out_dir, early_name))
            records.append(_record(early_name, "early", source.role,
                                   len(dump.early), spec.out_dir))
            dims["early"] = dump.early.shape[1]

    manifest_path = os.path.join(spec.out_dir, "manifest.json")
    write_manifest(manifest_path, split.num_classes, dims, records,
                   extra=_provenance(spec))
    return manifest_path


def _provenance(spec: ExportSpec) -> dict:
    return {
        "backbone": spec.backbone,
        "checkpoint": spec.checkpoint,
        "image_size": spec.image_size,
        "mean": list(spec.mean),
        "std": list(spec.std),
        "seed": spec.seed,
    }


def append_to_manifest(manifest_path: str, record: dict,
                       dims: dict | None = None) -> None:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    doc["records"].append(record)
    for layer, dim in (dims or {}).items():
        existing = doc["dims"].get(layer)
        if existing is not None and existing != dim:
            raise ValueError(
                f"{layer} dimension {dim} conflicts with manifest value {existing}"
            )
        doc["dims"][layer] = dim
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def runner_up_classes(logits: torch.Tensor) -> torch.Tensor:
    """Second-highest class per row (the nearest incorrect choice)."""
    return torch.topk(logits, k=2, dim=1).indices[:, 1]


def export_mixup_ood(spec: ExportSpec, early_protos: np.ndarray,
                     source: DatasetSource, lam: float | None = None,
                     split: SplitBackbone | None = None,
                     manifest_path: str | None = None,
                     rank: str = "logits",
                     pen_protos: np.ndarray | None = None) -> str:
    """Synthesize boundary-adjacent OOD features: interpolate each early
    activation toward the early prototype of its runner-up class, then run
    the mixture through the mid network.

    ``early_protos`` is the (num_classes, early_dim) matrix the detector
    computed from a plain early export. ``rank`` picks the runner-up from
    classifier logits (default) or from penultimate prototype distances
    ("ncp", requires ``pen_protos``). Returns the written file path.
    """
    if split is None:
        split = _spec_backbone(spec)
    split.to(spec.device)
    lam = spec.mixup_lam if lam is None else lam
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must be in [0, 1], got {lam}")
    if rank not in ("logits", "ncp"):
        raise ValueError(f"rank must be 'logits' or 'ncp', got {rank!r}")
    if rank == "ncp" and pen_protos is None:
        raise ValueError("rank='ncp' needs penultimate prototypes")

    # np.array copies, so read-only buffers from mapped files convert cleanly
    protos = torch.as_tensor(np.array(early_protos), dtype=torch.float32,
                             device=spec.device)
    if protos.ndim != 2 or protos.shape[0] != split.num_classes:
        raise ValueError(
            f"early prototypes must be ({split.num_classes}, early_dim), "
            f"got {tuple(protos.shape)}"
        )
    pen_ref = None
    if pen_protos is not None:
        pen_ref = torch.as_tensor(np.array(pen_protos), dtype=torch.float32,
                                  device=spec.device)

    parts = []
    with torch.no_grad():
        for batch in _loader(spec, source):
            x = batch[0] if isinstance(batch, (list, tuple)) else batch
            e = split.early(x.to(spec.device))
            flat = e.reshape(e.shape[0], -1)
            if flat.shape[1] != protos.shape[1]:
                raise ValueError(
                    f"early prototypes have dimension {protos.shape[1]}, the "
                    f"{spec.backbone} early cut produces {flat.shape[1]}"
                )
            if rank == "logits":
                ranking = split.head(split.mid(e))
            else:
                pen = split.mid(e)
                ranking = -torch.cdist(pen, pen_ref)
            targets = runner_up_classes(ranking)
            mixed = lam * flat + (1.0 - lam) * protos[targets]
            pen_syn = split.mid(mixed.reshape(e.shape))
            parts.append(pen_syn.cpu().numpy())

    features = np.concatenate(parts)
    name = f"{source.name}_mixup.grfd"
    out_path = os.path.join(spec.out_dir, name)
    write_grfd(TensorFile(layer="penultimate", features=features,
                          dataset_id=f"{source.name}_mixup",
                          num_classes=split.num_classes), out_path)
    if manifest_path is not None:
        append_to_manifest(
            manifest_path,
            _record(name, "penultimate", "synthetic_ood", len(features),
                    spec.out_dir),
            dims={"penultimate": features.shape[1]},
        )
    return out_path


def export_uniform_noise(spec: ExportSpec, count: int | None = None,
                         split: SplitBackbone | None = None,
                         manifest_path: str | None = None) -> str:
    """Push seeded uniform-pixel images through the backbone and dump
    their penultimate features with logits (energy selection happens in
    the detector). Returns the written file path."""
    if split is None:
        split = _spec_backbone(spec)
    split.to(spec.device)
    count = spec.noise_count if count is None else count
    if count < 1:
        raise ValueError(f"noise count must be >= 1, got {count}")

    generator = torch.Generator().manual_seed(spec.seed)
    images = torch.rand(count, 3, spec.image_size, spec.image_size,
                        generator=generator)
    mean = torch.tensor(spec.mean).view(1, 3, 1, 1)
    std = torch.tensor(spec.std).view(1, 3, 1, 1)
    images = (images - mean) / std

    parts, logit_parts = [], []
    with torch.no_grad():
        for start in range(0, count, spec.batch_size):
            chunk = images[start:start + spec.batch_size].to(spec.device)
            pen = split.mid(split.early(chunk))
            parts.append(pen.cpu().numpy())
            logit_parts.append(split.head(pen).cpu().numpy())

    features = np.concatenate(parts)
    logits = np.concatenate(logit_parts)
    name = "uniform_noise.grfd"
    out_path = os.path.join(spec.out_dir, name)
    os.makedirs(spec.out_dir, exist_ok=True)
    write_grfd(TensorFile(layer="penultimate", features=features, logits=logits,
                          dataset_id="uniform_noise",
                          num_classes=split.num_classes), out_path)
    if manifest_path is not None:
        append_to_manifest(
            manifest_path,
            _record(name, "penultimate", "ood_aux", count, spec.out_dir),
            dims={"penultimate": features.shape[1]},
        )
    return out_path
