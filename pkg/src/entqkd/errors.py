"""Exception hierarchy shared across the package."""


class QKDError(Exception):
    """Base class for all errors raised by entqkd."""


class InvalidInputError(QKDError, ValueError):
    pass


class UndefinedEstimateError(QKDError, ValueError):
    """An estimator was asked for a value with no supporting data (zero counts)."""


class InsufficientDataError(QKDError):
    pass


class NoSignalError(QKDError):
    """No correlation peak stands out above the accidental background."""


class ProtocolDesyncError(QKDError):
    """Alice and Bob hold inconsistent state (e.g. keys of different length)."""


class KeyExhaustedError(QKDError):
    pass


class ReuseForbiddenError(QKDError):
    """One-time-pad key bits were requested a second time."""


class StageError(QKDError):
    """Wraps a failure inside a pipeline stage, keeping the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
