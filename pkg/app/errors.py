"""BlindQE - Error Types"""


class BlindQEError(Exception):
    """Base class for every failure the toolkit reports."""


class ConfigurationError(BlindQEError):
    """Invalid settings, missing binaries or unusable paths."""


class ShapeMismatchError(BlindQEError, ValueError):
    """Vectors or planes whose shapes do not agree."""


class TimestepError(BlindQEError, ValueError):
    """Timestep outside [1, T]."""


class NonFiniteError(BlindQEError):
    """NaN or Inf in a loss, activation or predictor output."""


class CodecError(BlindQEError):
    """Failure while compressing a plane."""


class FormatError(BlindQEError):
    """A file whose content does not match its declared format."""


class ArchitectureMismatchError(BlindQEError):
    """Checkpoint config that differs from the requested architecture."""


class DatasetError(BlindQEError):
    """Empty corpus, missing planes or invalid sampling requests."""


class DegenerateSampleError(BlindQEError):
    """Sample whose compressed plane equals its ground truth."""
