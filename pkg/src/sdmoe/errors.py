"""Exception hierarchy shared by every module in the package."""


class SdMoeError(Exception):
    """Base class for all package errors."""


class ShapeError(SdMoeError, ValueError):
    pass


class NonFiniteError(SdMoeError, ValueError):
    pass


class ConvergenceError(SdMoeError, ArithmeticError):
    def __init__(self, message, off_norm=None):
        super().__init__(message)
        self.off_norm = off_norm


class RankDeficiencyError(SdMoeError, ArithmeticError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class NotOrthonormalError(SdMoeError, ValueError):
    def __init__(self, message, defect=None):
        super().__init__(message)
        self.defect = defect


class StaleCacheError(SdMoeError, RuntimeError):
    pass


class DivergenceError(SdMoeError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(SdMoeError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class CheckpointError(SdMoeError, IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass
