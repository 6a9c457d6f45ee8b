"""Exception types shared across the toolkit.

The CLI maps these onto its stable exit codes: argument/config problems
exit 2, data-format problems exit 3, environment failures exit 1.
"""


class SstError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(SstError):
    """Tensor or image shapes violate an operation's contract."""


class ArgumentError(SstError):
    """An argument value is outside its documented range."""


class ConfigError(SstError):
    """Model/patch contract mismatch detected before any work started."""


class FormatError(SstError):
    """Input data violates the expected on-disk format."""


class ModelLoadError(SstError):
    """A model container is corrupt, truncated, or has a bad version."""


class TrainingError(SstError):
    """Training produced non-finite values or otherwise failed."""


class StateError(SstError):
    """Operation requires a state the object is not in (e.g. untrained model)."""


class NumericError(SstError):
    """A numeric value is outside its required range."""
