"""Exception types shared across the toolkit."""


class GeoquantError(Exception):
    """Base class for all toolkit errors."""


class InvalidSizeError(GeoquantError):
    """Requested codebook or tensor size is out of the supported range."""


class NotUnitError(GeoquantError):
    """Input vector was expected to have unit norm."""


class ZeroVectorError(GeoquantError):
    """Operation is undefined for the zero vector."""


class CodeOutOfRangeError(GeoquantError):
    """Integer code does not fit in the requested bit width."""


class NonScalarLossError(GeoquantError):
    """Backward pass requires a scalar loss node."""


class ShapeMismatchError(GeoquantError):
    """Tensor shapes are inconsistent with the model configuration."""


class EmptyCalibrationSetError(GeoquantError):
    """Calibration requires a non-trivial set of frames."""


class DivergedLossError(GeoquantError):
    """Training loss became non-finite."""


class NonFiniteForceError(GeoquantError):
    """Force provider returned non-finite values."""


class CheckpointLoadError(GeoquantError):
    """Checkpoint file is missing, truncated, or inconsistent."""


class SelfCheckFailedError(GeoquantError):
    """Generated data failed its internal consistency check."""


class UsageError(GeoquantError):
    """Command line arguments or configuration are invalid."""
