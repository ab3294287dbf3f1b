"""Exception types shared across the soap-opera testing pipeline."""

from __future__ import annotations


class SoapError(Exception):
    """Base class for all errors raised by this package."""


# --- corpus ---------------------------------------------------------------

class MalformedReport(SoapError):
    """Report body is binary or otherwise undecodable as text."""


class EmptyScenario(SoapError):
    """Report carries no scenario knowledge (no steps and no oracles)."""


class FormatError(SoapError):
    """A corpus file violates the documented report format."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


# --- skg ------------------------------------------------------------------

class EmbedderFailure(SoapError):
    """An embedding backend failed for a given text."""

    def __init__(self, message: str, text: str | None = None):
        self.text = text
        super().__init__(message if text is None else f"{message} (text: {text!r})")


class UnknownStepId(SoapError):
    """Requested step id does not exist in the graph."""


# --- retrieval ------------------------------------------------------------

class InvalidChunkParams(SoapError):
    """Chunking parameters violate 0 <= overlap < chunk_size."""


class EmptyIndex(SoapError):
    """Search was issued against an index with no chunks."""


# --- llm ------------------------------------------------------------------

class PromptValidationError(SoapError):
    """System prompt is missing one of the required role-play components."""


class BackendError(SoapError):
    """Chat backend failed (HTTP status, timeout, or transport error)."""


class TranscriptExhausted(SoapError):
    """Playback transcript has no entry for the requested agent turn."""


class TranscriptMismatch(SoapError):
    """Playback fingerprint does not match the recorded query."""


class SchemaViolation(SoapError):
    """LLM response does not satisfy the expected JSON schema."""

    def __init__(self, message: str, fields: list[str] | None = None):
        self.fields = list(fields or [])
        super().__init__(message)


# --- device ---------------------------------------------------------------

class DeviceUnavailable(SoapError):
    """Device backend is not reachable or rejected a command."""


class CaptureTimeout(SoapError):
    """Screenshot capture did not complete in time."""


class ImageDecodeError(SoapError):
    """Screenshot bytes are not a decodable image."""


class LabelOutOfRange(SoapError):
    """Grid label outside 1..columns*rows."""


class InvalidInstruction(SoapError):
    """UI instruction violates the action/argument invariant table."""


class NoGridContext(SoapError):
    """Position-based instruction issued without a current labeled capture."""


# --- orchestrator ---------------------------------------------------------

class MissingLabel(SoapError):
    """A finding has no TP/FP verdict in the labels file."""
