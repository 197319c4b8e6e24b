"""Exception hierarchy shared by every module."""


class DeconfuseError(Exception):
    """Base class for all package errors."""


class ShapeError(DeconfuseError, ValueError):
    pass


class GeometryError(DeconfuseError, ValueError):
    """A convolution or pooling window does not fit the input."""


class DegenerateTransformError(DeconfuseError, ValueError):
    """log-det requested for an all-zero transform."""


class NumericOverflowError(DeconfuseError, ArithmeticError):
    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"non-finite value produced by primitive '{primitive}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class NonConvergenceError(DeconfuseError, RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class DivergenceError(DeconfuseError, RuntimeError):
    pass


class IllPosedError(DeconfuseError, ValueError):
    pass


class DegenerateLabelsError(DeconfuseError, ValueError):
    pass


class IngestionError(DeconfuseError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientDataError(DeconfuseError, ValueError):
    pass


class ConstantChannelError(DeconfuseError, ValueError):
    pass


class BankruptLedgerError(DeconfuseError, RuntimeError):
    pass


class CheckpointError(DeconfuseError, ValueError):
    pass


class CheckpointIncompatibleError(CheckpointError):
    pass


class ConfigError(DeconfuseError, ValueError):
    pass
