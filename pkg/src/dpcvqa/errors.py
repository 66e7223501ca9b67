"""Exception types shared across the package."""

from __future__ import annotations


class DPCError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DPCError, ValueError):
    pass


class ShapeError(InvalidInputError):
    pass


class FormatError(DPCError):
    """Malformed container or checkpoint bytes.

    ``offset`` is the byte position where decoding failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RecordError(InvalidInputError):
    """A record violates a container invariant; ``code`` names which one."""

    def __init__(self, code: str, message: str, video_id: str | None = None):
        prefix = f"record {video_id!r}: " if video_id is not None else ""
        super().__init__(f"{prefix}[{code}] {message}")
        self.code = code
        self.video_id = video_id


class NumericError(DPCError, ArithmeticError):
    pass


class UndefinedMetricError(DPCError, ValueError):
    pass


class ProtocolError(DPCError, ValueError):
    pass


class DataError(DPCError, ValueError):
    pass
