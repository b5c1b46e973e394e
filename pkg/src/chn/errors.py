"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit status (see ``chn.cli``).
"""


class CHNError(Exception):
    """Base class for all package errors."""


class ConfigError(CHNError, ValueError):
    """Invalid configuration or parameter value."""


class ShapeError(CHNError, ValueError):
    """Array dimensions do not agree."""


class InputError(CHNError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ParseError(CHNError, ValueError):
    """Malformed file contents."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DivergenceError(CHNError, ArithmeticError):
    """Training produced non-finite values.

    ``checkpoint`` carries the last parameters known to be finite.
    """

    def __init__(self, message, checkpoint=None, layer=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.layer = layer


class UndefinedMetricError(CHNError, ValueError):
    """A metric has no eligible queries to average over."""


class VerificationError(CHNError, AssertionError):
    """An exact identity check failed."""
