"""Exception hierarchy shared across the pipeline.

Each class maps onto one failure family so callers (and the CLI exit-code
table) can branch on type instead of on message text.
"""


class AvatarLinkError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(AvatarLinkError, ValueError):
    pass


class SequencingError(AvatarLinkError, ValueError):
    """Frames handed to an interpolator are not adjacent."""


class HalfRangeError(AvatarLinkError, OverflowError):
    """A value does not fit in IEEE binary16."""


class InvalidAvatarError(AvatarLinkError, ValueError):
    pass


class ProtocolError(AvatarLinkError):
    """Bad magic, unknown version or unexpected message during a session."""


class FramingError(AvatarLinkError):
    """Packet boundaries are inconsistent with the declared lengths."""


class CorruptionError(AvatarLinkError):
    """Payload or stored content failed decompression or hash verification."""


class SchemaError(AvatarLinkError, ValueError):
    pass


class SingularSystemError(AvatarLinkError, ArithmeticError):
    pass


class NotFoundError(AvatarLinkError, KeyError):
    pass


class SessionAbort(AvatarLinkError):
    """The session protocol gave up (hash mismatch, handshake timeout)."""
