"""Exception types shared across the pipeline."""


class SftgenError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SftgenError):
    """Run configuration is missing, malformed, or internally inconsistent."""


class TemplateError(SftgenError):
    """A prompt template could not be found or parsed."""


class SeedParseError(SftgenError):
    """A seed file line failed to parse or validate."""

    def __init__(self, path: str, line_no: int, byte_offset: int, reason: str):
        super().__init__(f"{path}:{line_no} (byte {byte_offset}): {reason}")
        self.path = path
        self.line_no = line_no
        self.byte_offset = byte_offset
        self.reason = reason


class EmptySeedSetError(SftgenError):
    """The seed file yielded zero valid seeds; the pipeline cannot start."""


class DuplicateInstructionError(SftgenError):
    """An instruction with the same id or canonical text already exists in the pool."""


class TransientProviderError(SftgenError):
    """Retryable provider failure (429, 5xx, timeout). Internal retry signal."""


class RetryExhaustedError(SftgenError):
    """All retry attempts against a provider failed with transient errors."""

    def __init__(self, attempts: int, last_error: Exception | None = None):
        super().__init__(f"provider call failed after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class AuthError(SftgenError):
    """Non-retryable authentication or authorization failure (401/403, missing key)."""


class MalformedResponseError(SftgenError):
    """The provider response carried no usable payload."""


class ProviderError(SftgenError):
    """Non-retryable provider failure outside the auth/malformed categories."""


class ExpansionParseError(SftgenError):
    """Zero candidate instructions could be extracted from an expansion response."""


class IndexNotBuiltError(SftgenError):
    """Retrieval was requested against a corpus index that is absent or invalid."""


class EmptyAnswerError(SftgenError):
    """The answering model returned empty text even after the retry."""


class RecordValidationError(SftgenError):
    """An instruction/answer pair failed dataset validation."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"record rejected ({reason}){': ' + detail if detail else ''}")
        self.reason = reason


class NoEvidenceError(SftgenError):
    """An answer revision was requested without any grounding evidence."""


class CheckpointMismatchError(SftgenError):
    """Resume was refused because the live config does not match the checkpoint."""
