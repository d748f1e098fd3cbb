"""
Exception types raised across the lesionseg package.
"""


class LesionSegError(Exception):
    """Base class for all lesionseg errors."""


class ShapeError(LesionSegError, ValueError):
    """Tensor or volume extents do not match what an operation requires."""


class NonFiniteError(LesionSegError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ConfigError(LesionSegError, ValueError):
    """A configuration document or field is invalid."""


class ScheduleError(LesionSegError, ValueError):
    """An epoch lies outside the configured schedule."""


class CaseFormatError(LesionSegError, ValueError):
    """An on-disk case, embedding or checkpoint could not be parsed.

    Attributes:
        field: Name of the header field or payload that failed validation
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
