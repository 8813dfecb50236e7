"""Exception hierarchy shared across the package."""


class DictShotError(Exception):
    """Base class for all errors raised by dictshot."""


class ShapeError(DictShotError, ValueError):
    pass


class ArgumentError(DictShotError, ValueError):
    pass


class NumericError(DictShotError, ArithmeticError):
    pass


class RankError(NumericError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"matrix is rank deficient at column {column}")


class DivergenceError(NumericError):
    """Non-finite loss during training; carries the partial report."""

    def __init__(self, iteration, report=None):
        self.iteration = iteration
        self.report = report
        super().__init__(f"non-finite loss at iteration {iteration}")


class StructureError(DictShotError):
    """Model graph does not have the structure an operation requires."""


class DataError(DictShotError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class CheckpointError(DictShotError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass
