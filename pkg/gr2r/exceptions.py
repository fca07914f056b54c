"""Exception types raised by the gr2r package."""

from typing import Any, Dict, Optional


class GR2RError(Exception):
    """Base class for all package errors."""


class ConfigError(GR2RError, ValueError):
    """Invalid configuration or parameter value."""


class ShapeError(GR2RError, ValueError):
    """Tensor or operator shapes do not match."""


class DomainError(GR2RError, ValueError):
    """A value lies outside the domain of the noise family."""

    def __init__(self, message: str, index: Optional[int] = None):
        if index is not None:
            message = f"{message} (pixel index {index})"
        super().__init__(message)
        self.index = index


class UnsupportedFamilyError(GR2RError, ValueError):
    """The operation is not available for this noise family."""


class ConvergenceError(GR2RError, RuntimeError):
    """An iterative procedure did not meet its stopping rule."""

    def __init__(self, message: str, residuals: Optional[Dict[int, float]] = None):
        super().__init__(message)
        self.residuals = residuals or {}


class DivergenceError(GR2RError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_state: Optional[Any] = None):
        super().__init__(message)
        self.last_state = last_state
