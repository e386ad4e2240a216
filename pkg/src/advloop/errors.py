"""Exception hierarchy shared by every pipeline stage."""


class AdvLoopError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AdvLoopError, ValueError):
    """A config, argument or dataset violates its contract."""


class InputShapeError(ValidationError):
    """A batch does not match the model's expected input shape."""


class FormatError(AdvLoopError):
    """A binary file does not follow its documented layout."""


class ConsistencyError(AdvLoopError):
    """Two related files disagree (e.g. IDX image and label counts)."""


class ConflictError(AdvLoopError):
    """An entry with the same key already exists."""


class NotFoundError(AdvLoopError, KeyError):
    """A requested registry or volume entry does not exist."""

    def __str__(self) -> str:
        return Exception.__str__(self)


class CorruptionError(AdvLoopError):
    """Stored content no longer matches its recorded checksum."""


class StateError(AdvLoopError):
    """An orchestrator operation was requested from an illegal state."""
