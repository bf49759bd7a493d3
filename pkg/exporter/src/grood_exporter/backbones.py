"""Backbone surgery: split a classifier into early / mid / head stages.

The early stage ends "after the first block" (first residual stage for
ResNets, first transformer block or stage for ViT/Swin); the mid stage
carries early activations to the penultimate vector; the head maps the
penultimate vector to logits. Early activations keep their tensor shape
internally and are flattened only at the file boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
from torchvision.models import resnet18, resnet50, swin_t, vit_b_16
from torchvision.models.resnet import ResNet
from torchvision.models.swin_transformer import SwinTransformer
from torchvision.models.vision_transformer import VisionTransformer


@dataclass
class SplitBackbone:
    """A model decomposed into composable stages.

    ``early``/``mid``/``head`` are callables on batched tensors;
    ``mid(early(x))`` equals the model's own penultimate activations and
    ``head`` applied on top reproduces its logits.
    """

    name: str
    model: nn.Module
    early: Callable[[torch.Tensor], torch.Tensor]
    mid: Callable[[torch.Tensor], torch.Tensor]
    head: Callable[[torch.Tensor], torch.Tensor]
    num_classes: int

    def early_shape(self, image_size: int, device: str = "cpu") -> tuple[int, ...]:
        probe = torch.zeros(1, 3, image_size, image_size, device=device)
        with torch.no_grad():
            return tuple(self.early(probe).shape[1:])

    def to(self, device: str) -> "SplitBackbone":
        self.model.to(device)
        return self


def _split_resnet(name: str, model: ResNet) -> SplitBackbone:
    def early(x):
        x = model.maxpool(model.relu(model.bn1(model.conv1(x))))
        return model.layer1(x)

    def mid(x):
        x = model.layer4(model.layer3(model.layer2(x)))
        return torch.flatten(model.avgpool(x), 1)

    return SplitBackbone(name=name, model=model, early=early, mid=mid,
                         head=model.fc, num_classes=model.fc.out_features)


def _split_vit(name: str, model: VisionTransformer) -> SplitBackbone:
    def early(x):
        x = model._process_input(x)
        cls = model.class_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        x = model.encoder.dropout(x + model.encoder.pos_embedding)
        return model.encoder.layers[0](x)

    def mid(x):
        for layer in model.encoder.layers[1:]:
            x = layer(x)
        return model.encoder.ln(x)[:, 0]

    out = model.heads.head.out_features
    return SplitBackbone(name=name, model=model, early=early, mid=mid,
                         head=model.heads, num_classes=out)


def _split_swin(name: str, model: SwinTransformer) -> SplitBackbone:
    def early(x):
        return model.features[1](model.features[0](x))

    def mid(x):
        for stage in model.features[2:]:
            x = stage(x)
        x = model.norm(x)
        x = model.permute(x) if hasattr(model, "permute") else x.permute(0, 3, 1, 2)
        return torch.flatten(model.avgpool(x), 1)

    return SplitBackbone(name=name, model=model, early=early, mid=mid,
                         head=model.head, num_classes=model.head.out_features)


class ToyCnn(nn.Module):
    """Small convolutional classifier for tests and demos."""

    def __init__(self, num_classes: int = 4, width: int = 8):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.body = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.fc = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        return self.fc(self.body(self.stem(x)))


class ToyIdentityMid(nn.Module):
    """Backbone whose mid stage is the identity: early activations *are*
    the penultimate features. Exists so the mixed-feature export can be
    cross-checked against plain feature-space interpolation."""

    def __init__(self, num_classes: int = 4, feature_dim: int = 16):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 8, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            nn.Linear(32, feature_dim), nn.Tanh(),
        )
        self.fc = nn.Linear(feature_dim, num_classes)

    def forward(self, x):
        return self.fc(self.encoder(x))


def _split_toy_cnn(name: str, model: ToyCnn) -> SplitBackbone:
    return SplitBackbone(name=name, model=model, early=model.stem,
                         mid=model.body, head=model.fc,
                         num_classes=model.fc.out_features)


def _split_toy_identity(name: str, model: ToyIdentityMid) -> SplitBackbone:
    return SplitBackbone(name=name, model=model, early=model.encoder,
                         mid=lambda x: x, head=model.fc,
                         num_classes=model.fc.out_features)


_BUILDERS: dict[str, Callable[[int], nn.Module]] = {
    "resnet18": lambda num_classes: resnet18(num_classes=num_classes),
    "resnet50": lambda num_classes: resnet50(num_classes=num_classes),
    "vit_b_16": lambda num_classes: vit_b_16(num_classes=num_classes),
    "swin_t": lambda num_classes: swin_t(num_classes=num_classes),
    "toy_cnn": lambda num_classes: ToyCnn(num_classes=num_classes),
    "toy_identity_mid": lambda num_classes: ToyIdentityMid(num_classes=num_classes),
}

BACKBONES = tuple(sorted(_BUILDERS))


def split_model(name: str, model: nn.Module) -> SplitBackbone:
    """Dispatch the stage split on the model's type."""
    if isinstance(model, ResNet):
        return _split_resnet(name, model)
    if isinstance(model, VisionTransformer):
        return _split_vit(name, model)
    if isinstance(model, SwinTransformer):
        return _split_swin(name, model)
    if isinstance(model, ToyCnn):
        return _split_toy_cnn(name, model)
    if isinstance(model, ToyIdentityMid):
        return _split_toy_identity(name, model)
    raise ValueError(
        f"no early/mid/head split registered for {type(model).__name__}; "
        f"known backbones: {', '.join(BACKBONES)}"
    )


def load_backbone(name: str, num_classes: int,
                  checkpoint: str | None = None) -> SplitBackbone:
    """Instantiate a registered backbone, optionally loading a local
    state-dict checkpoint, and split it into stages. Evaluation mode is
    forced; no weights are ever downloaded."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ValueError(
            f"unknown backbone {name!r}; available cut points: "
            f"{', '.join(BACKBONES)}"
        ) from None
    model = builder(num_classes)
    if checkpoint is not None:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        model.load_state_dict(state)
    model.eval()
    return split_model(name, model)
