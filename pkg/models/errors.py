"""
Exception hierarchy. Each error carries the CLI exit code it maps to.
"""
from typing import Iterable, Optional


class LabError(Exception):
    """Base class for all laboratory errors."""

    exit_code = 1


class ConfigurationError(LabError, ValueError):
    """Invalid configuration, grid, or system/state mismatch."""

    exit_code = 2


class ExpressionSyntaxError(ConfigurationError):
    """Syntax error in a potential expression."""

    def __init__(self, message: str, offset: int, expected: Optional[Iterable[str]] = None):
        self.offset = offset
        self.expected = sorted(set(expected or ()))
        detail = f" (expected one of {self.expected})" if self.expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class UnknownIdentifierError(ConfigurationError):
    """Identifier that is neither a variable nor a function."""

    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"Unknown identifier '{name}' at offset {offset}")


class EvaluationError(ConfigurationError):
    """Domain error while evaluating an expression."""


class UnsupportedConfigurationError(ConfigurationError):
    """Configuration that is valid but not implemented."""


class DegenerateFieldError(LabError, ValueError):
    """Field that is identically zero where a nonzero field is required."""

    exit_code = 3


class StepperError(LabError):
    """Time stepper cannot advance the state."""

    exit_code = 3


class DivergenceError(LabError):
    """Non-finite values appeared during propagation."""

    exit_code = 3

    def __init__(self, step: int, message: str = None):
        self.step = step
        super().__init__(message or f"Numerical divergence detected at step {step}")


class DegradedResultError(LabError):
    """Too many flagged results for the run to be trusted."""

    exit_code = 4
