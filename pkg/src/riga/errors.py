"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RigaError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(RigaError, ValueError):
    pass


class DegenerateGeometryError(RigaError, ValueError):
    pass


class ShapeError(RigaError, ValueError):
    pass


class DomainError(RigaError, ValueError):
    pass


class InsufficientCorrespondencesError(RigaError, ValueError):
    pass


class RegistrationFailedError(RigaError, RuntimeError):
    """No hypothesis reached the minimum inlier count.

    ``best`` holds the best attempt (a ``RansacResult``) so callers can still
    inspect it.
    """

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class ParseError(RigaError, ValueError):
    """Malformed input file.

    ``offset`` is a byte offset for binary formats, ``line`` a 1-based line
    number for text formats; whichever is not applicable stays ``None``.
    """

    def __init__(self, message: str, *, offset: int | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class CheckpointError(RigaError, ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError):
    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class ConfigError(RigaError, ValueError):
    pass
