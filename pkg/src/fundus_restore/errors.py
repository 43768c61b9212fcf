"""Exception hierarchy shared across the package."""


class FundusRestoreError(Exception):
    """Base class for all package errors."""


class ShapeError(FundusRestoreError, ValueError):
    pass


class NonFiniteError(FundusRestoreError, FloatingPointError):
    pass


class ConfigError(FundusRestoreError, ValueError):
    pass


class DataError(FundusRestoreError):
    pass


class MissingCounterpartError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class UnreadableFileError(DataError):
    pass


class CheckpointError(FundusRestoreError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class PlanCoverageError(FundusRestoreError, ValueError):
    pass
