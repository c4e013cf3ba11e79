"""Exception taxonomy shared across the package."""


class SnoreWatchError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SnoreWatchError):
    """Malformed file or container header."""


class UnsupportedError(FormatError):
    """Well-formed container, but a codec/layout we do not handle."""


class IoError(SnoreWatchError):
    """Underlying read/write failed."""


class RangeError(SnoreWatchError):
    """Requested range is empty, reversed, or outside the written stream."""


class EvictedError(SnoreWatchError):
    """Requested range is older than the buffer's retention window."""


class NumericError(SnoreWatchError):
    """Non-finite values where finite math is required."""


class ShapeError(SnoreWatchError):
    """Array or model shapes do not line up."""


class DataError(SnoreWatchError):
    """Dataset unusable: empty, single-class, or inconsistent."""


class CorruptError(SnoreWatchError):
    """Stored bytes fail their integrity check."""


class LengthError(SnoreWatchError):
    """Payload length does not match the fixed layout."""


class ProtocolError(SnoreWatchError):
    """Payload decodes to field values that violate message invariants."""


class UnknownCharError(SnoreWatchError):
    """Characteristic id not in the registry."""


class NetworkError(SnoreWatchError):
    """HTTP delivery failed permanently (retries exhausted or no route)."""
