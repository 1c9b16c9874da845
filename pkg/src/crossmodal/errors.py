"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so raise the most specific
class available.
"""


class CrossmodalError(Exception):
    """Base class for all package errors."""


class DimensionError(CrossmodalError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(CrossmodalError):
    """A configuration value violates an invariant or mismatches the data."""


class DataFormatError(CrossmodalError):
    """A dataset, embedding or manifest file violates its schema."""


class AlignmentError(CrossmodalError):
    """A word boundary cannot be mapped onto feature frames."""


class NumericError(CrossmodalError):
    """A non-finite value appeared where finite arithmetic was required."""


class CheckpointError(CrossmodalError):
    """A checkpoint file is unreadable or disagrees with the requested config."""


class DegenerateClassError(CrossmodalError):
    """A class has no positive or no negative examples in the training split."""


class UnsupportedOperationError(CrossmodalError):
    """The architecture cannot perform the requested operation."""
