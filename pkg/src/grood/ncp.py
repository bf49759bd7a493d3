"""Nearest-class-prototype classification and its out-of-distribution gradient.

A feature vector is scored against C class prototypes plus one artificial
OOD prototype. Negative Euclidean distances act as logits; the softmax
probability of the OOD slot drives a closed-form gradient of the
cross-entropy loss with respect to the OOD prototype:

    grad(h) = p_ood(h) * (h - ood_prototype) / ||h - ood_prototype||

whose norm equals p_ood(h) exactly. That gradient, computed per training
sample, forms the corpus searched by the index module.

All arithmetic accumulates in float64 regardless of input dtype. Functions
accept a single vector or an (n, d) batch and return matching shapes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._validation import as_matrix, as_vector
from .errors import ValidationError


class DegenerateGradientWarning(UserWarning):
    """A query coincided with the OOD prototype; its gradient is zero by convention."""


@dataclass(frozen=True)
class NcpModel:
    """Class prototypes plus the artificial OOD prototype (immutable)."""

    prototypes: np.ndarray
    ood_prototype: np.ndarray

    def __post_init__(self):
        protos = as_matrix(self.prototypes, "prototypes")
        ood = as_vector(self.ood_prototype, "ood_prototype")
        if ood.shape[0] != protos.shape[1]:
            raise ValidationError(
                f"ood_prototype has dimension {ood.shape[0]}, prototypes have {protos.shape[1]}"
            )
        clash = np.where(np.all(protos == ood, axis=1))[0]
        if clash.size:
            raise ValidationError(
                f"class prototype {int(clash[0])} exactly equals the OOD prototype"
            )
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "ood_prototype", ood)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def ood_index(self) -> int:
        """Index of the OOD slot in the logit vector (== num_classes)."""
        return self.prototypes.shape[0]


@dataclass(frozen=True)
class GradientMap:
    """Per-sample OOD-prototype gradients used as the search corpus.

    ``degenerate`` marks rows whose feature coincided with the OOD
    prototype (zero gradient by convention). Row norms never exceed 1.
    """

    gradients: np.ndarray
    source_ids: np.ndarray
    degenerate: np.ndarray

    @property
    def n(self) -> int:
        return self.gradients.shape[0]

    @property
    def dim(self) -> int:
        return self.gradients.shape[1]


def _as_batch(h, dim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(h, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValidationError(f"expected vectors of dimension {dim}, got shape {np.shape(h)}")
    return arr, single


def _chunk_rows(n: int, cols: int, budget: int = 1 << 22) -> int:
    return max(1, budget // max(1, cols))


def batch_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Euclidean distances from each query row to each point row, (m, K).

    Each entry is computed from its own (query, point) pair alone, so a
    distance value never depends on which other rows share the batch.
    """
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    m, d = queries.shape
    k = points.shape[0]
    out = np.empty((m, k), dtype=np.float64)
    step = _chunk_rows(m, k * d)
    for start in range(0, m, step):
        stop = min(m, start + step)
        diff = queries[start:stop, None, :] - points[None, :, :]
        np.sqrt(np.einsum("mkd,mkd->mk", diff, diff), out=out[start:stop])
    return out


def ncp_logits(h, model: NcpModel) -> np.ndarray:
    """Logit vector of length C+1: negative distances to each prototype,
    with the OOD prototype in the last slot. All entries are <= 0.
    """
    batch, single = _as_batch(h, model.dim)
    points = np.vstack([model.prototypes, model.ood_prototype[None, :]])
    logits = -batch_distances(batch, points)
    return logits[0] if single else logits


def ncp_softmax(logits) -> np.ndarray:
    """Max-shifted softmax along the last axis; rows sum to 1."""
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite logits")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def ncp_loss(h, y, model: NcpModel) -> np.ndarray | float:
    """Cross-entropy of the prototype softmax at class ``y``.

    ``y`` is 0-based; ``y == model.ood_index`` selects the OOD slot.
    Computed as logsumexp(L) - L_y, which never takes log of 0.
    """
    batch, single = _as_batch(h, model.dim)
    y_arr = np.broadcast_to(np.asarray(y, dtype=np.int64), (batch.shape[0],))
    if y_arr.size and (y_arr.min() < 0 or y_arr.max() > model.ood_index):
        raise ValidationError(f"class index out of range [0, {model.ood_index}]")
    logits = ncp_logits(batch, model)
    peak = logits.max(axis=-1)
    lse = peak + np.log(np.exp(logits - peak[:, None]).sum(axis=-1))
    losses = lse - logits[np.arange(batch.shape[0]), y_arr]
    return float(losses[0]) if single else losses


def ood_probability(h, model: NcpModel) -> np.ndarray | float:
    """Softmax probability of the OOD slot, p_ood(h)."""
    batch, single = _as_batch(h, model.dim)
    probs = ncp_softmax(ncp_logits(batch, model))[:, model.ood_index]
    return float(probs[0]) if single else probs


def ood_prototype_gradient(h, model: NcpModel) -> np.ndarray:
    """Closed-form gradient of the prototype cross-entropy with respect to
    the OOD prototype:

        p_ood(h) * (h - ood_prototype) / ||h - ood_prototype||

    Independent of which in-distribution label the loss is notionally taken
    at, and its norm equals p_ood(h). A query exactly at the OOD prototype
    yields the zero vector and a :class:`DegenerateGradientWarning`.
    """
    batch, single = _as_batch(h, model.dim)
    grads, degenerate = _gradient_batch(batch, model)
    if degenerate.any():
        warnings.warn(
            f"{int(degenerate.sum())} query vector(s) coincide with the OOD prototype; "
            "returning zero gradient(s)",
            DegenerateGradientWarning,
            stacklevel=2,
        )
    return grads[0] if single else grads


def _gradient_batch(batch: np.ndarray, model: NcpModel) -> tuple[np.ndarray, np.ndarray]:
    diff = batch - model.ood_prototype[None, :]
    dist = np.sqrt(np.einsum("nd,nd->n", diff, diff))
    prob = ncp_softmax(ncp_logits(batch, model))[:, model.ood_index]
    degenerate = dist == 0.0
    safe = np.where(degenerate, 1.0, dist)
    grads = diff * (prob / safe)[:, None]
    grads[degenerate] = 0.0
    return grads, degenerate


def gradient_map(train, model: NcpModel) -> GradientMap:
    """Gradient of every training-sample feature, row order preserved.

    ``train`` is a FeatureSet or an (n, d) matrix of penultimate features.
    Degenerate rows are recorded, not fatal.
    """
    feats = getattr(train, "features", train)
    batch = as_matrix(feats, "features")
    if batch.shape[1] != model.dim:
        raise ValidationError(
            f"features have dimension {batch.shape[1]}, model expects {model.dim}"
        )
    grads = np.empty_like(batch)
    degenerate = np.zeros(batch.shape[0], dtype=bool)
    step = _chunk_rows(batch.shape[0], model.num_classes * model.dim)
    for start in range(0, batch.shape[0], step):
        stop = min(batch.shape[0], start + step)
        grads[start:stop], degenerate[start:stop] = _gradient_batch(batch[start:stop], model)
    return GradientMap(
        gradients=grads,
        source_ids=np.arange(batch.shape[0], dtype=np.int64),
        degenerate=degenerate,
    )


def class_prototype_gradients(h, model: NcpModel) -> np.ndarray:
    """Gradients of the OOD-slot cross-entropy with respect to every class
    prototype, concatenated into one row of length C*d per sample.

    The per-class block is p_i(h) * (h - p_i) / ||h - p_i||; a block whose
    prototype coincides with the sample is zero.
    """
    batch, single = _as_batch(h, model.dim)
    probs = ncp_softmax(ncp_logits(batch, model))[:, : model.num_classes]
    out = np.empty((batch.shape[0], model.num_classes * model.dim), dtype=np.float64)
    step = _chunk_rows(batch.shape[0], model.num_classes * model.dim)
    for start in range(0, batch.shape[0], step):
        stop = min(batch.shape[0], start + step)
        diff = batch[start:stop, None, :] - model.prototypes[None, :, :]
        dist = np.sqrt(np.einsum("ncd,ncd->nc", diff, diff))
        safe = np.where(dist == 0.0, 1.0, dist)
        blocks = diff * (probs[start:stop] / safe)[:, :, None]
        blocks[dist == 0.0] = 0.0
        out[start:stop] = blocks.reshape(stop - start, -1)
    return out[0] if single else out


def ncp_predict(h, model: NcpModel, include_ood: bool = False) -> np.ndarray | int:
    """Nearest-prototype class (argmin distance); ties break to the lowest
    index. With ``include_ood`` the OOD slot (index C) can win.
    """
    batch, single = _as_batch(h, model.dim)
    logits = ncp_logits(batch, model)
    if not include_ood:
        logits = logits[:, : model.num_classes]
    pred = np.argmax(logits, axis=-1)
    return int(pred[0]) if single else pred
