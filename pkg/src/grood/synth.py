"""Synthetic benchmark with collapsed class geometry.

Generates C Gaussian clusters centered on the vertices of a simplex
equiangular tight frame (the limiting geometry of well-trained feature
spaces), plus two OOD clouds: a hard "near" cloud sitting at midpoints
between prototype pairs, and an easy "far" cloud mixing an offset Gaussian
with a uniform box. Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .feature_io import FeatureSet


@dataclass(frozen=True)
class BenchmarkParams:
    num_classes: int = 10
    dim: int = 64
    sigma: float = 0.1
    ood_offset: float = 2.5
    n_per_class: int = 1000
    n_test_per_class: int = 100
    n_ood: int = 1000
    proto_scale: float = 2.5
    box_half_width: float = 1.5
    # Spread of the near cloud around the midpoints, in units of sigma.
    # 2x leaves the near cloud radially entangled with the ID shell, which
    # keeps plain distance-to-prototype scoring imperfect there.
    near_sigma_factor: float = 2.0
    seed: int = 0


@dataclass(frozen=True)
class BenchmarkData:
    params: BenchmarkParams
    prototypes: np.ndarray
    train: FeatureSet
    id_test: FeatureSet
    ood_test: dict[str, FeatureSet] = field(default_factory=dict)


def simplex_etf(num_classes: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """Vertices of a simplex equiangular tight frame in ``dim`` dimensions.

    Rows have equal norm ``scale``, pairwise cosine -1/(C-1), and sum to
    zero exactly up to rounding.
    """
    if num_classes < 2:
        raise ValidationError("an equiangular frame needs at least 2 classes")
    if dim < num_classes:
        raise ValidationError(f"dim {dim} too small for {num_classes} frame vertices")
    basis = np.eye(num_classes, dim)
    centered = basis - basis.mean(axis=0, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    return scale * centered / norms


def _offset_direction(dim: int) -> np.ndarray:
    direction = np.ones(dim)
    return direction / np.linalg.norm(direction)


def make_benchmark(params: BenchmarkParams) -> BenchmarkData:
    """Sample the full benchmark: ID train/test plus near and far OOD sets."""
    p = params
    if p.sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {p.sigma}")
    rng = np.random.default_rng(p.seed)
    protos = simplex_etf(p.num_classes, p.dim, p.proto_scale)

    def id_draw(n_per_class: int) -> tuple[np.ndarray, np.ndarray]:
        feats = np.concatenate(
            [protos[c] + rng.normal(0.0, p.sigma, size=(n_per_class, p.dim))
             for c in range(p.num_classes)]
        )
        labels = np.repeat(np.arange(p.num_classes), n_per_class)
        return feats, labels

    train_x, train_y = id_draw(p.n_per_class)
    test_x, test_y = id_draw(p.n_test_per_class)

    # Near OOD: noise around midpoints of every prototype pair, cycled.
    pairs = [(a, b) for a in range(p.num_classes) for b in range(a + 1, p.num_classes)]
    mids = np.array([(protos[a] + protos[b]) / 2.0 for a, b in pairs])
    picks = np.arange(p.n_ood) % len(pairs)
    near_sigma = p.near_sigma_factor * p.sigma
    near = mids[picks] + rng.normal(0.0, near_sigma, size=(p.n_ood, p.dim))

    # Far OOD: half an offset Gaussian, half a uniform box around the origin.
    n_gauss = p.n_ood // 2
    center = _offset_direction(p.dim) * p.ood_offset * p.proto_scale
    far_gauss = center + rng.normal(0.0, p.sigma, size=(n_gauss, p.dim))
    half = p.box_half_width * p.proto_scale
    far_box = rng.uniform(-half, half, size=(p.n_ood - n_gauss, p.dim))
    far = np.concatenate([far_gauss, far_box])

    return BenchmarkData(
        params=p,
        prototypes=protos,
        train=FeatureSet(layer="penultimate", features=train_x, labels=train_y,
                         dataset_id="synth_train", dtype="f64",
                         num_classes=p.num_classes),
        id_test=FeatureSet(layer="penultimate", features=test_x, labels=test_y,
                           dataset_id="synth_id_test", dtype="f64",
                           num_classes=p.num_classes),
        ood_test={
            "near": FeatureSet(layer="penultimate", features=near,
                               dataset_id="near", dtype="f64",
                               num_classes=p.num_classes),
            "far": FeatureSet(layer="penultimate", features=far,
                              dataset_id="far", dtype="f64",
                              num_classes=p.num_classes),
        },
    )
