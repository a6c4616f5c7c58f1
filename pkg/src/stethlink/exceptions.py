"""Exception hierarchy shared across the package."""


class StethlinkError(Exception):
    """Base class for all package errors."""


class ValidationError(StethlinkError, ValueError):
    """Input violates a documented precondition."""


class FilterDesignError(ValidationError):
    """Requested filter cannot be realized (e.g. cutoff at or above Nyquist)."""


class DecodeError(StethlinkError, ValueError):
    """Malformed packet bytes."""


class VersionError(DecodeError):
    pass


class TruncatedError(DecodeError):
    pass


class LengthMismatchError(DecodeError):
    pass


class EncodeError(StethlinkError, ValueError):
    pass


class InsufficientDataError(StethlinkError, ValueError):
    """Not enough detected events to compute a statistic."""


class WavError(StethlinkError):
    """Base class for WAV parse failures."""


class UnsupportedFormatError(WavError):
    pass


class UnsupportedChannelsError(WavError):
    pass


class UnsupportedBitDepthError(WavError):
    pass


class MalformedWavError(WavError):
    pass


class ControlError(StethlinkError, ValueError):
    """Rejected control command."""


class ProtocolError(StethlinkError):
    """Stream framing violation."""


class ServiceError(StethlinkError):
    """Network service could not start or connect."""
