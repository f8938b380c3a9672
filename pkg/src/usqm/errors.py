"""Exception hierarchy shared across the toolkit.

Every error raised on purpose derives from UsqmError so callers (and the
CLI exit-code mapping) can distinguish toolkit failures from bugs.
"""


class UsqmError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(UsqmError):
    """Array or image dimensions violate an operation's contract."""


class ParameterError(UsqmError):
    """A scalar parameter is outside its declared range."""


class LayerIndexError(UsqmError):
    """A requested encoder layer does not exist in the extractor profile."""


class InsufficientDataError(UsqmError):
    """Too few samples to fit the requested model."""


class UnknownOrganError(UsqmError):
    """An organ name is not present in the model bank."""


class UnreachableTargetError(UsqmError):
    """A PSNR target lies outside the achievable range of a degradation."""


class MonotonicityError(UsqmError):
    """A severity sweep produced increasing PSNR; the distortion is buggy."""


class UndefinedStatisticError(UsqmError):
    """A statistic is undefined for the given input (e.g. constant vector)."""


class SchemaError(UsqmError):
    """An input file violates its declared schema."""


class StoreError(UsqmError):
    """Base class for persistence failures."""


class DecodeError(StoreError):
    """A stored artifact is truncated or malformed."""


class UnsupportedVersionError(StoreError):
    """A stored artifact declares a format version this build cannot read."""


class CorruptModelError(StoreError):
    """A decoded model violates its own invariants."""


class FingerprintMismatchError(StoreError):
    """A bank was fitted under a different extractor than the one in use."""
