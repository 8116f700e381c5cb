"""Exception types shared across the pipeline."""


class LongSynthError(Exception):
    """Base class for all pipeline errors."""


class CorpusError(LongSynthError):
    """Malformed corpus input (bad line, duplicate id, empty corpus)."""


class EmbeddingError(LongSynthError):
    """Embedding backend failed after retries.

    failed_indices lists the positions (into the original text batch) that
    could not be embedded.
    """

    def __init__(self, message: str, failed_indices: list[int] | None = None):
        super().__init__(message)
        self.failed_indices = failed_indices or []


class BackendError(LongSynthError):
    """A single backend call failed. retryable controls the retry loop."""

    def __init__(self, message: str, retryable: bool = True, status: int | None = None):
        super().__init__(message)
        self.retryable = retryable
        self.status = status


class RetryExhaustedError(LongSynthError):
    """All retry attempts failed; carries the last underlying failure."""

    def __init__(self, message: str, last_error: Exception | None = None, attempts: int = 0):
        super().__init__(message)
        self.last_error = last_error
        self.attempts = attempts


class JsonPayloadError(LongSynthError):
    """No parseable JSON object in an LLM response; caller should regenerate."""


class SchemaError(LongSynthError):
    """Parsed JSON is missing a required key or has a wrong type."""

    def __init__(self, message: str, key: str):
        super().__init__(message)
        self.key = key


class TemplateError(LongSynthError):
    """Prompt rendering got a missing or unexpected binding."""


class QfsStallError(LongSynthError):
    """A summarization round failed to shrink the text and truncation is off."""


class SynthesisError(LongSynthError):
    """A workflow stage produced an unusable sample; the sample is skipped."""


class ConfigError(LongSynthError):
    """Invalid run configuration."""
