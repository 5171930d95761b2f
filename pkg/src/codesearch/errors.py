"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 3, everything else
derived from CodeSearchError -> 1.
"""


class CodeSearchError(Exception):
    """Base class for all errors raised by this package."""


# --- corpus ---------------------------------------------------------------

class CorpusParseError(CodeSearchError):
    """A corpus line is not a parseable record."""

    def __init__(self, message: str, byte_offset: int = 0):
        super().__init__(message)
        self.byte_offset = byte_offset


class CorpusSchemaError(CodeSearchError):
    """A record is missing a required field or a field has the wrong shape."""

    def __init__(self, field: str, message: str = ""):
        super().__init__(message or f"invalid or missing field: {field}")
        self.field = field


class UnsupportedLanguageError(CodeSearchError):
    """Record names a language outside the supported set."""


class CorpusQualityError(CodeSearchError):
    """Too many invalid lines in one corpus file."""


class PartitionOverlapError(CodeSearchError):
    """The same entry id appears in more than one partition."""


# --- tokenizer ------------------------------------------------------------

class BpeTrainingError(CodeSearchError):
    """Subword training cannot proceed (e.g. empty token stream)."""


class VocabSizeError(CodeSearchError):
    """Requested vocabulary size below the minimum the data allows."""


class TokenIdRangeError(CodeSearchError):
    """A token id is outside the model's vocabulary."""


class BpeFormatError(CodeSearchError):
    """A serialized subword model file is malformed."""


# --- encoder / checkpoints ------------------------------------------------

class NotNormalizedError(CodeSearchError):
    """A similarity was requested on an unnormalized embedding."""


class ZeroVectorError(CodeSearchError):
    """An embedding collapsed to the zero vector and cannot be normalized."""


class CheckpointFormatError(CodeSearchError):
    """A checkpoint file is malformed, truncated, or fails its checksum."""


class DimensionMismatchError(CodeSearchError):
    """Checkpoint dimensions disagree with the expected configuration."""


# --- training -------------------------------------------------------------

class TrainingError(CodeSearchError):
    """Training aborted (e.g. non-finite loss)."""


class SamplingError(CodeSearchError):
    """Negative sampling is impossible (corpus too small)."""


# --- index / retrieval ----------------------------------------------------

class IndexFormatError(CodeSearchError):
    """An index file has the wrong magic bytes or layout."""


class IndexCorruptionError(CodeSearchError):
    """An index file is truncated or fails its checksum."""


class StaleIndexError(CodeSearchError):
    """Index was built with a different checkpoint than the one querying it."""


class EmptyQueryError(CodeSearchError):
    """Query text produced no tokens."""


# --- evaluation -----------------------------------------------------------

class NoRelevantCandidateError(CodeSearchError):
    """A ranking task has no relevant candidate; the metric is undefined."""


# --- cli ------------------------------------------------------------------

class ConfigError(CodeSearchError):
    """Bad run configuration (missing paths, contradictory options)."""
