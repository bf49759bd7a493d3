"""Writer/reader for the GRFD embedding exchange format.

This is the exporter-side implementation of the shared on-disk contract;
the detector package validates the emitted files independently. Layout
(all little-endian, row-major):

    magic "GRFD" | version u32 | layer u8 | dtype u8 | flags u8 | 0 u8
    | n u64 | d u64 | num_classes u32 | id_len u16 | dataset_id utf-8
    | features | labels i32 (flag bit 0) | logits (flag bit 1)
    | BLAKE2b-64 checksum of the payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"GRFD"
FORMAT_VERSION = 1
LAYERS = ("early", "penultimate")
DTYPES = ("f32", "f64")

_HEADER = struct.Struct("<4sIBBBBQQIH")
_NP_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_LABEL_DTYPE = np.dtype("<i4")


class GrfdError(ValueError):
    pass


@dataclass
class TensorFile:
    """In-memory image of one GRFD file."""

    layer: str
    features: np.ndarray
    labels: np.ndarray | None = None
    logits: np.ndarray | None = None
    dataset_id: str = ""
    dtype: str = "f32"
    num_classes: int = 0


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def write_grfd(tf: TensorFile, path: str | os.PathLike) -> None:
    feats = np.ascontiguousarray(tf.features, dtype=_NP_DTYPE[tf.dtype])
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
        raise GrfdError(f"features must be a non-empty matrix, got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise GrfdError("non-finite feature")
    n, d = feats.shape

    num_classes = tf.num_classes
    logits = tf.logits
    if logits is not None:
        logits = np.ascontiguousarray(logits, dtype=_NP_DTYPE[tf.dtype])
        if logits.shape[0] != n:
            raise GrfdError("logits row count mismatch")
        num_classes = num_classes or logits.shape[1]
    labels = tf.labels
    if labels is not None:
        labels = np.ascontiguousarray(labels, dtype=_LABEL_DTYPE)
        if labels.shape != (n,):
            raise GrfdError("labels length mismatch")
        num_classes = num_classes or int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= num_classes:
            raise GrfdError("label out of range")

    dataset_id = tf.dataset_id.encode("utf-8")
    flags = (1 if labels is not None else 0) | (2 if logits is not None else 0)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, LAYERS.index(tf.layer),
                          DTYPES.index(tf.dtype), flags, 0, n, d, num_classes,
                          len(dataset_id))
    payload = feats.tobytes(order="C")
    if labels is not None:
        payload += labels.tobytes(order="C")
    if logits is not None:
        payload += logits.tobytes(order="C")

    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(dataset_id)
        fh.write(payload)
        fh.write(_checksum(payload))
    os.replace(tmp, path)


def read_grfd(path: str | os.PathLike) -> TensorFile:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise GrfdError(f"{path}: truncated header")
    magic, version, layer_tag, dtype_tag, flags, _, n, d, num_classes, id_len = (
        _HEADER.unpack_from(blob, 0))
    if magic != MAGIC or version != FORMAT_VERSION:
        raise GrfdError(f"{path}: not a supported GRFD file")
    dtype = DTYPES[dtype_tag]
    itemsize = _NP_DTYPE[dtype].itemsize
    payload_size = n * d * itemsize
    if flags & 1:
        payload_size += n * 4
    if flags & 2:
        payload_size += n * num_classes * itemsize
    expected = _HEADER.size + id_len + payload_size + 8
    if len(blob) != expected:
        raise GrfdError(f"{path}: size mismatch ({len(blob)} vs {expected})")
    offset = _HEADER.size
    dataset_id = blob[offset:offset + id_len].decode("utf-8")
    offset += id_len
    payload = blob[offset:offset + payload_size]
    if _checksum(payload) != blob[-8:]:
        raise GrfdError(f"{path}: checksum mismatch")

    pos = 0
    feats = np.frombuffer(payload, dtype=_NP_DTYPE[dtype], count=n * d).reshape(n, d)
    pos += n * d * itemsize
    labels = None
    if flags & 1:
        labels = np.frombuffer(payload, dtype=_LABEL_DTYPE, count=n, offset=pos)
        pos += n * 4
    logits = None
    if flags & 2:
        logits = np.frombuffer(payload, dtype=_NP_DTYPE[dtype],
                               count=n * num_classes, offset=pos)
        logits = logits.reshape(n, num_classes)
    return TensorFile(layer=LAYERS[layer_tag], features=feats, labels=labels,
                      logits=logits, dataset_id=dataset_id, dtype=dtype,
                      num_classes=num_classes)


def file_checksum(path: str | os.PathLike) -> str:
    with open(path, "rb") as fh:
        blob = fh.read()
    return blob[-8:].hex()


def write_manifest(path: str | os.PathLike, num_classes: int, dims: dict,
                   records: list[dict], extra: dict | None = None) -> None:
    doc = {
        "version": 1,
        "num_classes": num_classes,
        "dims": dims,
        "endianness": "little",
        "records": records,
    }
    if extra:
        doc["export"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
