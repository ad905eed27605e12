"""Exception hierarchy shared by every mimictun module."""


class MimicError(Exception):
    """Base class for all mimictun errors."""


class SchemaError(MimicError):
    """A field schema is malformed (bad kind, overlap, unknown rule...)."""


class IngestError(MimicError):
    """A capture could not be turned into a profile."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)
        self.index = index


class ProfileFormatError(MimicError):
    """A serialized profile or model document is invalid."""


class CapacityError(MimicError):
    """More bits were offered than a datagram can carry."""


class ProfileTooSmall(CapacityError):
    """The profile cannot carry even the smallest frame."""


class NotHostProtocol(MimicError):
    """A payload contains a value never observed in the host protocol."""


class NotEncodable(MimicError):
    """A payload uses an observed value whose index is outside the coded range."""


class FramingError(MimicError):
    pass


class MessageTooLarge(FramingError):
    pass


class IncompleteMessage(FramingError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing frames {self.missing}")


class CorruptMessage(FramingError):
    pass


class BlockSizeError(FramingError):
    pass


class InferenceError(MimicError):
    """Timing model inference failed (flat histogram, too many states...)."""


class StatsDomainError(MimicError, ValueError):
    """Statistical routine called outside its domain."""


class SessionFailure(MimicError):
    """A tunnel session cannot make progress (peer gone, retries exhausted)."""
