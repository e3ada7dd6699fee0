"""Exception hierarchy shared by every module."""


class CECSError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 1


class ConfigError(CECSError, ValueError):
    exit_code = 2


class DataError(CECSError, ValueError):
    exit_code = 3


class NumericError(CECSError, ArithmeticError):
    exit_code = 4


class VerificationError(CECSError):
    exit_code = 5


class ShapeError(CECSError, ValueError):
    exit_code = 4


class UsageError(CECSError, ValueError):
    exit_code = 2


class SlateError(DataError):
    pass


class CapacityError(CECSError, RuntimeError):
    exit_code = 3


class CheckpointError(CECSError):
    exit_code = 3


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
