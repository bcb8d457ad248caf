class UvcamoError(Exception):
    """Base class for errors raised by this package."""


class MalformedMeshError(UvcamoError, ValueError):
    pass


class ShapeMismatchError(UvcamoError, ValueError):
    pass


class DegenerateSampleError(UvcamoError, ValueError):
    """A sample has no vehicle pixels (fully occluded or out of frame)."""


class InvariantViolationError(UvcamoError, ValueError):
    pass


class TrainingFailedError(UvcamoError, RuntimeError):
    pass


class NonFiniteLossError(UvcamoError, FloatingPointError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
