"""Exception hierarchy and the process exit-code contract.

Exit codes: 0 success, 2 validation, 3 numeric divergence,
4 incompatibility, 5 I/O.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_INCOMPATIBLE = 4
EXIT_IO = 5


class LretError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(LretError):
    """Invalid inputs, configs, or violated preconditions."""

    exit_code = EXIT_VALIDATION


class InputShapeError(ValidationError):
    """Array dimensions do not match the declared contract."""


class AlignmentError(ValidationError):
    """Missing scale or mismatched patch index sets across scales."""


class UndefinedRelevanceError(ValidationError):
    """Relevance requested for a pair of all-zero staining patterns."""


class StratificationError(ValidationError):
    """Too few cases per subtype to build the requested folds."""


class StaleTapeError(LretError):
    """A backward pass was given a tape from a mutated network."""


class DivergenceError(LretError):
    """Non-finite loss or gradient during training."""

    exit_code = EXIT_DIVERGENCE


class IncompatibilityError(LretError):
    """Artifacts that cannot be combined (fingerprints, versions, lexicons)."""

    exit_code = EXIT_INCOMPATIBLE


class DataIOError(LretError):
    """File-level failures in dataset/database/checkpoint handling."""

    exit_code = EXIT_IO


class FormatError(DataIOError):
    """File is not in the expected container format."""


class VersionMismatchError(IncompatibilityError):
    """File declares a container version this build does not read."""


class TruncationError(DataIOError):
    """Blob shorter than the offsets recorded in the manifest."""


class ChecksumError(DataIOError):
    """CRC32 recorded in the manifest does not match the blob."""
