"""Exception hierarchy shared by every pipeline stage.

Each family carries the process exit code used by the command line:
1 usage, 2 data, 3 numeric failure.
"""
from typing import Optional


class PipelineError(Exception):
    """Base class for all pipeline errors"""
    exit_code: int = 2


class UsageError(PipelineError):
    exit_code = 1


class DataError(PipelineError, ValueError):
    exit_code = 2


class NumericError(PipelineError, ArithmeticError):
    exit_code = 3


# Data errors

class EmptyGrid(DataError):
    pass


class UnknownLens(DataError):
    pass


class OddDimensions(DataError):
    pass


class OutOfBounds(DataError):
    def __init__(self, message: str, centroid: Optional[tuple] = None):
        super().__init__(message)
        self.centroid = centroid


class MismatchedKeys(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NoTrainingData(DataError):
    pass


class NonPositiveDepth(DataError):
    pass


class TooFewCorrespondences(DataError):
    pass


class InvalidRange(DataError):
    pass


class NoOverlap(DataError):
    pass


class MissingAsset(DataError):
    pass


class FormatError(DataError):
    pass


# Numeric errors

class EmptyMask(NumericError):
    pass


class DegenerateX(NumericError):
    pass


class NoConsensus(NumericError):
    pass


class DegenerateGeometry(NumericError):
    pass


class BehindFocalPlane(NumericError):
    pass


class StageError(PipelineError):
    """Wraps a stage failure with the stage name; keeps the wrapped exit code."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
