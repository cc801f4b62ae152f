"""Exception types raised across the package."""


class SpannError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(SpannError, ValueError):
    pass


class FormatError(SpannError, ValueError):
    """A vector file or index file does not follow the expected layout."""

    def __init__(self, message: str, record: int | None = None):
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)
        self.record = record


class CorruptionError(SpannError):
    """Stored bytes do not match their recorded checksum."""


class InternalError(SpannError, RuntimeError):
    """A contract between two modules was breached."""
