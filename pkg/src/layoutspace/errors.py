"""Exception hierarchy shared by every module.

Each error carries a stable machine-readable ``code`` used by the CLI exit-code
mapping and the HTTP error envelope.
"""

from __future__ import annotations


class LayoutspaceError(Exception):
    """Base class; ``code`` is stable across releases."""

    code = "internal"
    #: CLI exit category: 2 validation, 3 computation, 4 I/O.
    exit_code = 3

    def __init__(self, message: str, **detail):
        super().__init__(message)
        self.detail = detail


class ValidationError(LayoutspaceError):
    code = "validation"
    exit_code = 2


class ComputationError(LayoutspaceError):
    code = "computation"
    exit_code = 3


class IoError(LayoutspaceError):
    code = "io"
    exit_code = 4


# --- embedding-core ---------------------------------------------------------

class ZeroVector(ValidationError):
    code = "zero_vector"


class DimensionMismatch(ValidationError):
    code = "dimension_mismatch"


class EmptySet(ValidationError):
    code = "empty_set"


# --- metric-learning --------------------------------------------------------

class InvalidLabel(ValidationError):
    code = "invalid_label"


class DegenerateEmbedding(ValidationError):
    code = "degenerate_embedding"


class BatchTooSmall(ValidationError):
    code = "batch_too_small"


class UnknownClass(ValidationError):
    code = "unknown_class"


class ShapeMismatch(ValidationError):
    code = "shape_mismatch"


class EmptySplit(ValidationError):
    code = "empty_split"


class NonFiniteLoss(ComputationError):
    code = "non_finite_loss"


class TooFewClasses(ValidationError):
    code = "too_few_classes"


# --- cluster-analytics ------------------------------------------------------

class KTooLarge(ValidationError):
    code = "k_too_large"


class PerplexityTooLarge(ValidationError):
    code = "perplexity_too_large"


class UnknownCluster(ValidationError):
    code = "unknown_cluster"


class InvalidPercentile(ValidationError):
    code = "invalid_percentile"


class DegenerateCentroids(ComputationError):
    code = "degenerate_centroids"


# --- fraud-discovery --------------------------------------------------------

class StaleModel(ValidationError):
    code = "stale_model"


class UnknownSeed(ValidationError):
    code = "unknown_seed"


class NoKnownLayouts(ValidationError):
    code = "no_known_layouts"


class SnapshotMismatch(ValidationError):
    code = "snapshot_mismatch"


class AlreadyReviewed(ValidationError):
    code = "already_reviewed"


class UnknownItem(ValidationError):
    code = "unknown_item"


# --- datastore-ingest -------------------------------------------------------

class ParseError(IoError):
    code = "parse_error"

    def __init__(self, message: str, row: int | None = None, **detail):
        super().__init__(message, row=row, **detail)
        self.row = row


class DuplicateId(ValidationError):
    code = "duplicate_id"

    def __init__(self, message: str, row: int | None = None, **detail):
        super().__init__(message, row=row, **detail)
        self.row = row


class MissingHeader(IoError):
    code = "missing_header"


class UnknownDataset(ValidationError):
    code = "unknown_dataset"


class StaleSnapshot(ValidationError):
    code = "stale_snapshot"


class InfeasibleSpec(ValidationError):
    code = "infeasible_spec"


# --- triage-service ---------------------------------------------------------

class ConfigError(ValidationError):
    code = "config_error"


class JobConflict(ValidationError):
    code = "job_conflict"


class JobCanceled(ComputationError):
    code = "job_canceled"


class UnknownJob(ValidationError):
    code = "unknown_job"
