"""Exception types shared across the package."""


class SpacePoseError(Exception):
    """Base class for all package errors."""


class ConfigError(SpacePoseError, ValueError):
    """Invalid shapes, hyperparameters or configuration values."""


class NumericError(SpacePoseError, ArithmeticError):
    """A NaN or Inf appeared in a forward or backward pass."""


class DegenerateRepresentation(SpacePoseError, ValueError):
    """A 6D attitude vector whose columns are zero or parallel."""


class BehindCamera(SpacePoseError):
    """A point lies at or behind the camera plane."""


class OutOfRange(SpacePoseError, ValueError):
    """A value falls outside the supported bin edges."""


class FormatError(SpacePoseError, ValueError):
    """Malformed on-disk file (bad magic, version or truncated payload)."""


class FrameCountMismatch(FormatError):
    """Manifest and frame binary disagree on the number of frames."""
