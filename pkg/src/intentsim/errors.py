"""Exception hierarchy for the intentsim package."""

from __future__ import annotations


class IntentSimError(Exception):
    """Base class for all package errors."""


class SchemaError(IntentSimError):
    """A document or structured value violates its schema.

    Carries the offending path (e.g. ``trees[0].children[1].id``) so callers
    can point at the exact field.
    """

    def __init__(self, message: str, path: str = "") -> None:
        self.path = path
        super().__init__(f"{message} (at {path})" if path else message)


class ForestError(IntentSimError):
    """Structural violation inside an intent forest (duplicate id, orphan, cycle)."""


class GatewayError(IntentSimError):
    """Base class for chat-backend failures."""


class RetryExhaustedError(GatewayError):
    """All retry attempts against the backend failed."""


class AuthenticationError(GatewayError):
    """Backend rejected (or is missing) credentials."""


class ReplayMissError(GatewayError):
    """Replay mode saw a request whose digest is absent from the cassette."""

    def __init__(self, digest: str) -> None:
        self.digest = digest
        super().__init__(f"no cassette record for request digest {digest}")


class StructuredParseError(IntentSimError):
    """A completion could not be parsed into the requested schema.

    ``attempts`` holds the parse error message of each failed attempt
    (at most two: original plus the single repair re-prompt).
    """

    def __init__(self, message: str, attempts: list[str] | None = None) -> None:
        self.attempts = attempts or [message]
        super().__init__(message)


class LeakageError(IntentSimError):
    """Generated text mentions intent content the user is not allowed to express."""


class PolicyError(IntentSimError):
    """An assistant policy failed to produce a response."""


class PipelineError(IntentSimError):
    """A multi-step run failed; carries the turn index where it happened."""

    def __init__(self, message: str, turn: int | None = None) -> None:
        self.turn = turn
        super().__init__(f"turn {turn}: {message}" if turn is not None else message)


class MetricsError(IntentSimError):
    """Metric computation received inputs it cannot score."""
