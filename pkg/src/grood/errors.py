"""Exception taxonomy.

Every error raised by this package derives from :class:`GroodError` and
carries a short machine-readable ``category`` string that the CLI maps to
its exit diagnostics.
"""

from __future__ import annotations


class GroodError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class ValidationError(GroodError):
    """An input violates a documented invariant (shape, finiteness, range)."""

    category = "validation"


class FormatError(GroodError):
    """A feature file is structurally invalid (magic, version, header)."""

    category = "format"


class ChecksumError(GroodError):
    """Stored payload checksum does not match the payload bytes."""

    category = "checksum"


class TruncationError(GroodError):
    """A feature file is shorter than its header declares."""

    category = "truncated"


class ManifestError(GroodError):
    """A manifest is inconsistent with the files it describes."""

    category = "manifest"


class ConfigError(GroodError):
    """A run configuration is incomplete or self-contradictory."""

    category = "config"


class NotFittedError(GroodError):
    """A bundle or estimator was used before being fitted."""

    category = "not-fitted"
