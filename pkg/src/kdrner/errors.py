"""Exception types shared across the package."""


class KdrError(Exception):
    """Base class for package errors."""


class DatasetError(KdrError):
    """Malformed or inconsistent input data."""


class TemplateError(KdrError):
    """Missing or malformed prompt template file."""


class ConfigError(KdrError):
    """Invalid run configuration."""


class TransportError(KdrError):
    """Network/API failure that survived the retry policy."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class UnscriptedPromptError(KdrError):
    """A scripted or replayed backend received a prompt it has no answer for.

    Carries the request fingerprint so fixture drift is diagnosable.
    """

    def __init__(self, fingerprint: str):
        super().__init__(f"unscripted prompt: {fingerprint}")
        self.fingerprint = fingerprint


class SnapshotIncompleteError(KdrError):
    """An offline snapshot cache was asked for a query it never recorded."""

    def __init__(self, query: str):
        super().__init__(f"snapshot incomplete: no cached entry for query {query!r}")
        self.query = query
