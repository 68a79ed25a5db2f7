"""Exception and warning types shared across the package."""


class MsfuseError(Exception):
    """Base class for all package errors."""


class DimensionError(MsfuseError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(MsfuseError, ValueError):
    """A configuration value is invalid."""


class UsageError(MsfuseError, RuntimeError):
    """An API was called in a way it does not support."""


class NumericError(MsfuseError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class DataError(MsfuseError):
    """Base class for problems with input data or files."""


class GeometryError(DataError, ValueError):
    """Volumes do not overlap or have unsupported orientation."""


class VolumeFormatError(DataError):
    """Base class for H3V / H3CK parse failures."""


class BadMagicError(VolumeFormatError):
    pass


class CorruptFileError(VolumeFormatError):
    """Header and payload disagree about the amount of data."""


class TruncatedFileError(CorruptFileError):
    """The file ends before the declared payload does."""


class ValidationError(DataError, ValueError):
    """Well-formed data that violates a domain invariant."""


class DegenerateWarning(UserWarning):
    """A computation fell back to a degenerate-case convention."""
