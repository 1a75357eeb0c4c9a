"""Exception types raised across the package."""


class SslCilError(Exception):
    """Base class for every error raised by sslcil."""


class ParameterError(SslCilError, ValueError):
    """An argument is outside its documented domain."""


class ShapeError(SslCilError, ValueError):
    """Array dimensions do not line up."""


class ProtocolError(SslCilError):
    """The incremental-learning protocol was violated (e.g. overlapping classes)."""


class FrozenError(SslCilError):
    """A mutating operation was attempted on frozen backbone weights, or an
    embedding was requested from weights that are not frozen yet."""


class NotTrainedError(SslCilError):
    """Prediction was requested from an empty analytic state."""


class DecodeError(SslCilError, ValueError):
    """A posterior vector cannot be decoded to an angle."""


class NumericalError(SslCilError):
    """A matrix that must be symmetric positive definite is not."""


class FormatError(SslCilError):
    """A container or checkpoint file is malformed."""


class ChecksumError(FormatError):
    """A checkpoint failed its integrity check."""
