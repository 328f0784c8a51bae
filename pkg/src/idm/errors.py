"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class ResourceLimitError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


class NumericFailure(ArithmeticError):
    """Raised when an iterative numeric routine fails to converge."""

    def __init__(self, message, last_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate


class NumericAbort(ArithmeticError):
    """Training produced a non-finite loss; ``record`` holds the diagnostics."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
