"""Exception hierarchy shared across pipeline stages.

Every error the pipeline can surface to a caller derives from ForgeError so
the CLI can map error classes to distinct exit codes.
"""

from __future__ import annotations


class ForgeError(Exception):
    """Base class for all pipeline errors."""


# --- ingest ---------------------------------------------------------------

class ManifestInvalid(ForgeError):
    """The dataset manifest fails schema or referential checks."""


class RecordInvalid(ForgeError):
    """A records-file line violates the source-record schema."""

    def __init__(self, dataset_id: str, line_no: int, reason: str) -> None:
        self.dataset_id = dataset_id
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{dataset_id}:{line_no}: {reason}")


class MissingImage(ForgeError):
    """A referenced image file does not exist under the image root."""


# --- scoring --------------------------------------------------------------

class InsufficientImages(ForgeError):
    """Requested more distinct images than the corpus holds."""


class ParseFailure(ForgeError):
    """A model response carries no recoverable structured content."""


class OutOfRange(ForgeError):
    """A parsed label lies outside its allowed range."""


class BackendUnavailable(ForgeError):
    """The scorer backend cannot be reached at all."""


# --- selection ------------------------------------------------------------

class MissingScore(ForgeError):
    """A corpus image has no row in the score table."""


class PlanMismatch(ForgeError):
    """Availability observed at sampling time differs from the plan."""


# --- clustering -----------------------------------------------------------

class EmptyDocument(ForgeError):
    """A document produced zero tokens and cannot be vectorized."""

    def __init__(self, index: int) -> None:
        self.index = index
        super().__init__(f"document {index} has no tokens")


class NoVectors(ForgeError):
    """K-Means was called with an empty vector set."""


class EmptyTask(ForgeError):
    """No selected records carry the requested task type."""


# --- genclient ------------------------------------------------------------

class Throttled(ForgeError):
    """Internal signal: the upstream asked us to slow down (retryable)."""


class RateLimited(ForgeError):
    """Throttling persisted through the whole backoff schedule."""


class UpstreamError(ForgeError):
    """The backend answered with a non-retryable failure."""


class Timeout(ForgeError):
    """The backend did not answer within the configured deadline."""


# --- augment --------------------------------------------------------------

class EmptyDemoPool(ForgeError):
    """No demonstration questions are available for the record's task."""


class InvalidKind(ForgeError):
    """The requested augmentation kind is not a question transform."""


class AbortThresholdExceeded(ForgeError):
    """The synthesis failure rate crossed the configured abort threshold."""


# --- emit -----------------------------------------------------------------

class DanglingParent(ForgeError):
    """A generated pair references a record id outside the selected set."""


class IoError(ForgeError):
    """Writing a dataset artifact failed."""


# --- cli ------------------------------------------------------------------

class ConfigInvalid(ForgeError):
    """The pipeline config file fails validation."""
