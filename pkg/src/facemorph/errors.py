"""Exception hierarchy shared by all modules."""


class FaceMorphError(Exception):
    pass


class ConfigError(FaceMorphError, ValueError):
    """Invalid configuration (CLI exit code 2)."""


class DataError(FaceMorphError, ValueError):
    """Missing or malformed data on disk (CLI exit code 3)."""


class ShapeError(DataError):
    pass


class ValidationError(DataError):
    pass


class ProtocolError(DataError):
    pass


class DomainError(FaceMorphError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericAbort(FaceMorphError, RuntimeError):
    """Training produced a non-finite loss (CLI exit code 4)."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
