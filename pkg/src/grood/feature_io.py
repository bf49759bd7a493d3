"""On-disk exchange format for embedding matrices (GRFD files) and manifests.

A GRFD file stores one feature matrix for one network layer, with optional
integer labels and optional logits, followed by a 64-bit payload checksum.
All multi-byte values are little-endian; matrices are row-major.

Layout::

    magic        4 bytes   b"GRFD"
    version      uint32
    layer        uint8     0 = early, 1 = penultimate
    dtype        uint8     0 = f32, 1 = f64
    flags        uint8     bit 0 labels present, bit 1 logits present
    reserved     uint8     always 0
    n            uint64    rows
    d            uint64    feature columns
    num_classes  uint32    label/logit class count (0 when unused)
    id_len       uint16    dataset_id byte length
    dataset_id   id_len bytes, UTF-8
    features     n * d * itemsize bytes
    labels       n * 4 bytes int32            (if flag set)
    logits       n * num_classes * itemsize   (if flag set)
    checksum     8 bytes   BLAKE2b-64 of everything between dataset_id
                           and the checksum itself

A manifest is a UTF-8 JSON file listing the GRFD files of one experiment,
their roles, and per-file checksums.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import require_finite, require_labels
from .errors import (
    ChecksumError,
    FormatError,
    ManifestError,
    TruncationError,
    ValidationError,
)

MAGIC = b"GRFD"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1

LAYERS = ("early", "penultimate")
DTYPES = ("f32", "f64")
ROLES = ("id_train", "id_test", "ood_aux", "ood_test", "synthetic_ood", "gradient_corpus")

# Roles that must carry labels / must not carry labels.
_LABELED_ROLES = frozenset({"id_train"})
_UNLABELED_ROLES = frozenset({"ood_aux", "ood_test", "synthetic_ood"})

_HEADER = struct.Struct("<4sIBBBBQQIH")
_CHECKSUM_BYTES = 8

_NP_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_LABEL_DTYPE = np.dtype("<i4")


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_BYTES).digest()


@dataclass(frozen=True)
class FeatureSet:
    """A labeled embedding matrix for one layer of one dataset.

    ``features`` has shape (n, d). ``labels`` (length n, values in
    [0, num_classes)) and ``logits`` (shape (n, num_classes)) are optional.
    Immutable after construction; safe to share across threads.
    """

    layer: str
    features: np.ndarray
    labels: np.ndarray | None = None
    logits: np.ndarray | None = None
    dataset_id: str = ""
    dtype: str = "f32"
    num_classes: int = 0

    def __post_init__(self):
        if self.layer not in LAYERS:
            raise ValidationError(f"unknown layer {self.layer!r}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"unknown dtype {self.dtype!r}")
        feats = np.ascontiguousarray(self.features, dtype=_NP_DTYPE[self.dtype])
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValidationError(
                f"features must be a non-empty 2-D matrix, got shape {np.shape(self.features)}"
            )
        if not np.all(np.isfinite(feats)):
            raise ValidationError("non-finite feature")
        object.__setattr__(self, "features", feats)

        n = feats.shape[0]
        num_classes = int(self.num_classes)

        logits = self.logits
        if logits is not None:
            logits = np.ascontiguousarray(logits, dtype=_NP_DTYPE[self.dtype])
            if logits.ndim != 2 or logits.shape[0] != n:
                raise ValidationError(
                    f"logits must have {n} rows, got shape {logits.shape}"
                )
            require_finite(logits, "logits")
            if num_classes == 0:
                num_classes = logits.shape[1]
            elif logits.shape[1] != num_classes:
                raise ValidationError(
                    f"logits have {logits.shape[1]} columns, expected {num_classes}"
                )
            object.__setattr__(self, "logits", logits)

        labels = self.labels
        if labels is not None:
            if num_classes == 0:
                num_classes = int(np.max(labels)) + 1
            labels = require_labels(labels, n, num_classes)
            object.__setattr__(self, "labels", labels.astype(_LABEL_DTYPE))

        object.__setattr__(self, "num_classes", num_classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def restrict(self, rows: np.ndarray) -> "FeatureSet":
        """Return a copy containing only the given row indices."""
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            labels=None if self.labels is None else self.labels[rows],
            logits=None if self.logits is None else self.logits[rows],
        )


def header_size(dataset_id: str) -> int:
    return _HEADER.size + len(dataset_id.encode("utf-8"))


def write_feature_set(fset: FeatureSet, path: str | os.PathLike) -> None:
    """Serialize ``fset`` to ``path`` in the GRFD layout above.

    The write is atomic: data goes to a sibling temp file that is renamed
    into place only after a successful flush.
    """
    dataset_id = fset.dataset_id.encode("utf-8")
    if len(dataset_id) > 0xFFFF:
        raise ValidationError("dataset_id longer than 65535 bytes")

    flags = (1 if fset.labels is not None else 0) | (2 if fset.logits is not None else 0)
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        LAYERS.index(fset.layer),
        DTYPES.index(fset.dtype),
        flags,
        0,
        fset.n,
        fset.dim,
        fset.num_classes,
        len(dataset_id),
    )

    payload = bytearray(fset.features.tobytes(order="C"))
    if fset.labels is not None:
        payload += fset.labels.tobytes(order="C")
    if fset.logits is not None:
        payload += fset.logits.tobytes(order="C")
    payload = bytes(payload)

    tmp = os.fspath(path) + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(dataset_id)
            fh.write(payload)
            fh.write(_checksum(payload))
        os.replace(tmp, path)
    except OSError as exc:
        raise FormatError(f"cannot write feature file {path}: {exc}") from exc


def read_feature_set(path: str | os.PathLike) -> FeatureSet:
    """Read and fully validate a GRFD file.

    Raises :class:`FormatError` for a bad magic/version/header,
    :class:`TruncationError` when the file is shorter than the header
    declares, :class:`ChecksumError` on payload corruption, and
    :class:`ValidationError` for invariant violations (non-finite values,
    out-of-range labels).
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read feature file {path}: {exc}") from exc

    if len(blob) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than fixed header")
    magic, version, layer_tag, dtype_tag, flags, _reserved, n, d, num_classes, id_len = (
        _HEADER.unpack_from(blob, 0)
    )
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if layer_tag >= len(LAYERS) or dtype_tag >= len(DTYPES) or flags > 3:
        raise FormatError(f"{path}: invalid layer/dtype/flags tags")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: header declares empty matrix ({n}, {d})")

    dtype = DTYPES[dtype_tag]
    itemsize = _NP_DTYPE[dtype].itemsize
    has_labels = bool(flags & 1)
    has_logits = bool(flags & 2)
    if (has_labels or has_logits) and num_classes < 1:
        raise FormatError(f"{path}: labels/logits present but num_classes is 0")

    payload_size = n * d * itemsize
    if has_labels:
        payload_size += n * _LABEL_DTYPE.itemsize
    if has_logits:
        payload_size += n * num_classes * itemsize
    expected = _HEADER.size + id_len + payload_size + _CHECKSUM_BYTES
    if len(blob) < expected:
        raise TruncationError(
            f"{path}: expected {expected} bytes for declared shape, found {len(blob)}"
        )
    if len(blob) > expected:
        raise FormatError(f"{path}: {len(blob) - expected} trailing bytes after checksum")

    offset = _HEADER.size
    dataset_id = blob[offset : offset + id_len].decode("utf-8")
    offset += id_len
    payload = blob[offset : offset + payload_size]
    stored = blob[offset + payload_size :]
    if _checksum(payload) != stored:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    pos = 0
    features = np.frombuffer(payload, dtype=_NP_DTYPE[dtype], count=n * d, offset=pos)
    features = features.reshape(n, d)
    pos += n * d * itemsize
    labels = None
    if has_labels:
        labels = np.frombuffer(payload, dtype=_LABEL_DTYPE, count=n, offset=pos)
        pos += n * _LABEL_DTYPE.itemsize
    logits = None
    if has_logits:
        logits = np.frombuffer(payload, dtype=_NP_DTYPE[dtype], count=n * num_classes, offset=pos)
        logits = logits.reshape(n, num_classes)

    # FeatureSet.__post_init__ re-checks finiteness and label range.
    return FeatureSet(
        layer=LAYERS[layer_tag],
        features=features,
        labels=labels,
        logits=logits,
        dataset_id=dataset_id,
        dtype=dtype,
        num_classes=num_classes,
    )


def file_checksum(path: str | os.PathLike) -> str:
    """Hex digest of the stored payload checksum of a GRFD file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CHECKSUM_BYTES:
        raise TruncationError(f"{path}: too short to contain a checksum")
    return blob[-_CHECKSUM_BYTES:].hex()


@dataclass
class ManifestRecord:
    path: str
    layer: str
    role: str
    count: int
    checksum: str | None = None


@dataclass
class Manifest:
    """Index of the GRFD files making up one experiment."""

    num_classes: int
    dims: dict[str, int]
    records: list[ManifestRecord] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def records_for(self, role: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.role == role]


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    doc = {
        "version": manifest.version,
        "num_classes": manifest.num_classes,
        "dims": dict(manifest.dims),
        "endianness": "little",
        "records": [
            {
                "path": r.path,
                "layer": r.layer,
                "role": r.role,
                "count": r.count,
                "checksum": r.checksum,
            }
            for r in manifest.records
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path: str | os.PathLike) -> Manifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc

    try:
        records = [
            ManifestRecord(
                path=r["path"],
                layer=r["layer"],
                role=r["role"],
                count=int(r["count"]),
                checksum=r.get("checksum"),
            )
            for r in doc["records"]
        ]
        manifest = Manifest(
            num_classes=int(doc["num_classes"]),
            dims={k: int(v) for k, v in doc["dims"].items()},
            records=records,
            version=int(doc.get("version", MANIFEST_VERSION)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"manifest {path} is missing required fields: {exc}") from exc

    for record in manifest.records:
        if record.layer not in LAYERS:
            raise ManifestError(f"manifest record {record.path}: unknown layer {record.layer!r}")
        if record.role not in ROLES:
            raise ManifestError(f"manifest record {record.path}: unknown role {record.role!r}")
    return manifest


def read_record(manifest: Manifest, record: ManifestRecord, base_dir: str | os.PathLike) -> FeatureSet:
    """Load one manifest record and check it against its declaration."""
    full = os.path.join(os.fspath(base_dir), record.path)
    if not os.path.exists(full):
        raise ManifestError(f"manifest references missing file {record.path}")
    fset = read_feature_set(full)

    if fset.layer != record.layer:
        raise ManifestError(
            f"{record.path}: layer {fset.layer!r} does not match declared {record.layer!r}"
        )
    if fset.n != record.count:
        raise ManifestError(
            f"{record.path}: {fset.n} rows do not match declared count {record.count}"
        )
    declared_dim = manifest.dims.get(record.layer)
    if declared_dim is not None and fset.dim != declared_dim:
        raise ManifestError(
            f"{record.path}: dimension {fset.dim} does not match manifest "
            f"{record.layer} dimension {declared_dim}"
        )
    if record.checksum is not None and file_checksum(full) != record.checksum:
        raise ChecksumError(f"{record.path}: checksum does not match manifest")

    if record.role in _LABELED_ROLES and fset.labels is None:
        raise ManifestError(f"{record.path}: role {record.role} requires labels")
    if record.role in _UNLABELED_ROLES and fset.labels is not None:
        raise ManifestError(f"{record.path}: role {record.role} forbids labels")
    if fset.labels is not None or fset.logits is not None:
        if fset.num_classes != manifest.num_classes:
            raise ManifestError(
                f"{record.path}: file num_classes {fset.num_classes} does not match "
                f"manifest num_classes {manifest.num_classes}"
            )
    if fset.labels is not None and fset.labels.size:
        if int(fset.labels.max()) >= manifest.num_classes:
            raise ManifestError(
                f"{record.path}: label {int(fset.labels.max())} out of range for "
                f"{manifest.num_classes} classes"
            )
    return fset


def validate_manifest(manifest: Manifest, base_dir: str | os.PathLike) -> None:
    """Check that every record parses and agrees with its declaration.

    Also enforces that all records claiming the same layer share one
    feature dimension, even when the manifest omits that layer from
    ``dims``.
    """
    seen_dims: dict[str, tuple[int, str]] = {}
    for record in manifest.records:
        fset = read_record(manifest, record, base_dir)
        prev = seen_dims.get(record.layer)
        if prev is not None and prev[0] != fset.dim:
            raise ManifestError(
                f"layer {record.layer}: dimension mismatch between {prev[1]} "
                f"(d={prev[0]}) and {record.path} (d={fset.dim})"
            )
        seen_dims.setdefault(record.layer, (fset.dim, record.path))
