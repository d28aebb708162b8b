# Exception types shared by every package in the segmentation engine.
# The CLI maps them onto exit codes (see main.py).


class SegmentationError(Exception):
    """Base class for all errors raised by the segmentation engine."""
    pass


class ShapeError(SegmentationError, ValueError):
    """Raised when tensor extents are incompatible with an operation."""
    pass


class ConfigValidationError(SegmentationError, ValueError):
    """Raised when a model, block, training or CLI configuration is invalid."""
    pass


class DataError(SegmentationError):
    """Raised when dataset files are missing, unmatched or undecodable."""
    pass


class CheckpointError(DataError):
    """Raised when a checkpoint file is corrupt or has an unsupported format."""
    pass


class NumericError(SegmentationError, ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""
    pass


class UnsupportedOperationError(SegmentationError):
    """Raised when receptive-field analysis meets a layer it cannot model."""
    pass
