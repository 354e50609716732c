"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class FutureKVError(Exception):
    exit_code = 1


class ConfigurationError(FutureKVError, ValueError):
    exit_code = 2


class ShapeError(ConfigurationError):
    """Array shapes disagree with each other or with a config."""


class RangeError(ConfigurationError):
    """A position falls outside the precomputed RoPE table."""


class PreconditionError(ConfigurationError):
    pass


class ProtocolError(ConfigurationError):
    """Cache operations issued in an invalid order (e.g. a frame appended twice)."""


class FormatError(FutureKVError):
    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass


class NumericError(FutureKVError, ArithmeticError):
    exit_code = 4
