"""Exception taxonomy shared by every PRLF module."""


class PRLFError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(PRLFError):
    """A caller broke a documented precondition (shape, range, ordering)."""


class NumericError(PRLFError):
    """A computation produced or received non-finite values."""


class DataFormatError(PRLFError):
    """A dataset or checkpoint file failed validation.

    Carries the offending line number when the format is line-delimited.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(PRLFError):
    """Invalid configuration: unknown key, bad value, or failed validation."""
