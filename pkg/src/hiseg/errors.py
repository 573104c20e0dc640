"""Exception types shared across the package."""


class HisegError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(HisegError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(HisegError):
    """Input values lie outside the operation's numeric domain."""


class UsageError(HisegError):
    """The call violates a documented usage contract (wrong mode, missing input)."""


class FormatError(HisegError):
    """A serialized container is malformed.

    Carries the byte offset at which the problem was detected when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(HisegError):
    """A configuration document contains unknown or invalid keys/values."""


class TrainingError(HisegError):
    """Training aborted; the message names the offending batch and loss term."""
