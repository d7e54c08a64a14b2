"""Exception hierarchy. The CLI maps these families to distinct exit codes."""


class TabShapError(Exception):
    exit_code = 1


class ConfigError(TabShapError, ValueError):
    exit_code = 2


class DataError(TabShapError, ValueError):
    exit_code = 3


class NumericError(TabShapError, ArithmeticError):
    exit_code = 4


class DimensionError(TabShapError, ValueError):
    exit_code = 3


class ValidationError(TabShapError, ValueError):
    exit_code = 3


class UsageError(TabShapError, RuntimeError):
    pass


class CapabilityError(TabShapError, ValueError):
    """Request exceeds what an exact algorithm can enumerate."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries the last finite checkpoint."""

    def __init__(self, message: str, checkpoint=None, report=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.report = report
