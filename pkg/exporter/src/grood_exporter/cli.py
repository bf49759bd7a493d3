"""Command-line entry points for the exporter.

``features`` dumps datasets through a backbone, ``mixup-ood`` synthesizes
boundary-adjacent OOD features from early-layer interpolation, and
``uniform-noise`` probes the backbone with seeded noise images.
"""

from __future__ import annotations

import json
import sys

import click

from .backbones import BACKBONES
from .export import (
    DatasetSource,
    ExportSpec,
    export_features,
    export_mixup_ood,
    export_uniform_noise,
)
from .grfd import GrfdError, read_grfd


def _fail(message: str, category: str = "export") -> None:
    click.echo(json.dumps({"category": category, "message": message}), err=True)
    sys.exit(1)


def spec_options(func):
    options = [
        click.option("--backbone", type=click.Choice(BACKBONES), default="toy_cnn",
                     show_default=True),
        click.option("--checkpoint", type=click.Path(exists=True), default=None,
                     help="Local state-dict checkpoint to load."),
        click.option("--num-classes", type=int, default=4, show_default=True),
        click.option("--image-size", type=int, default=32, show_default=True),
        click.option("--batch-size", type=int, default=64, show_default=True),
        click.option("--device", default="cpu", show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--out", "out_dir", required=True, type=click.Path()),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _make_spec(out_dir, backbone, checkpoint, num_classes, image_size,
               batch_size, device, seed, **extra) -> ExportSpec:
    return ExportSpec(backbone=backbone, checkpoint=checkpoint,
                      num_classes=num_classes, image_size=image_size,
                      batch_size=batch_size, device=device, seed=seed,
                      out_dir=out_dir, **extra)


def _parse_dataset(raw: str) -> DatasetSource:
    parts = raw.split(":", 2)
    if len(parts) != 3:
        raise click.BadParameter(
            f"expected name:role:path, got {raw!r}")
    name, role, path = parts
    try:
        return DatasetSource(name=name, role=role, root=path)
    except ValueError as exc:
        raise click.BadParameter(str(exc))


@click.group()
def main():
    """Export backbone features to GRFD files for the OOD detector."""


@main.command()
@spec_options
@click.option("--dataset", "datasets", multiple=True, required=True,
              help="name:role:image-folder, repeatable.")
@click.option("--early-for", "early_roles", multiple=True, default=("id_train",),
              show_default=True, help="Roles that also get an early-layer dump.")
def features(datasets, early_roles, **spec_kw):
    """Dump penultimate (and early) features for one or more datasets."""
    spec = _make_spec(**spec_kw)
    sources = [_parse_dataset(raw) for raw in datasets]
    try:
        manifest = export_features(spec, sources, early_roles=tuple(early_roles))
    except (ValueError, GrfdError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps({"manifest": manifest}, sort_keys=True))


@main.command("mixup-ood")
@spec_options
@click.option("--dataset", "dataset", required=True,
              help="name:role:image-folder of the ID data to mix.")
@click.option("--early-protos", "early_protos_path", required=True,
              type=click.Path(exists=True),
              help="GRFD file with the detector's early-layer class prototypes.")
@click.option("--lam", type=float, default=0.5, show_default=True)
@click.option("--rank", type=click.Choice(["logits", "ncp"]), default="logits",
              show_default=True)
@click.option("--pen-protos", "pen_protos_path", type=click.Path(exists=True),
              default=None, help="Penultimate prototypes, needed for --rank ncp.")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              default=None, help="Manifest to append the synthetic record to.")
def mixup_ood(dataset, early_protos_path, lam, rank, pen_protos_path,
              manifest_path, **spec_kw):
    """Synthesize OOD features by early-layer interpolation toward the
    runner-up class, pushed through the mid network."""
    spec = _make_spec(**spec_kw)
    source = _parse_dataset(dataset)
    try:
        protos = read_grfd(early_protos_path).features
        pen_protos = (read_grfd(pen_protos_path).features
                      if pen_protos_path else None)
        path = export_mixup_ood(spec, protos, source, lam=lam, rank=rank,
                                pen_protos=pen_protos,
                                manifest_path=manifest_path)
    except (ValueError, GrfdError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps({"synthetic_ood": path, "lam": lam}, sort_keys=True))


@main.command("uniform-noise")
@spec_options
@click.option("--count", type=int, default=100, show_default=True)
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              default=None, help="Manifest to append the noise record to.")
def uniform_noise(count, manifest_path, **spec_kw):
    """Export features and logits of seeded uniform-pixel noise images."""
    spec = _make_spec(**spec_kw)
    try:
        path = export_uniform_noise(spec, count=count,
                                    manifest_path=manifest_path)
    except (ValueError, GrfdError, OSError) as exc:
        _fail(str(exc))
    click.echo(json.dumps({"noise": path, "count": count}, sort_keys=True))


@main.command("cut-points")
def cut_points():
    """List the registered backbones and their early-cut definitions."""
    doc = {
        "resnet18": "stem + first residual stage",
        "resnet50": "stem + first residual stage",
        "vit_b_16": "patch embedding + first encoder block",
        "swin_t": "patch embedding + first stage",
        "toy_cnn": "two-conv stem",
        "toy_identity_mid": "full encoder (mid stage is the identity)",
    }
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
