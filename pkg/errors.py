"""
errors.py - Exception hierarchy shared by every module
Each error carries the CLI exit code it maps to.
"""

from typing import Any, Dict, Optional

from constants import EXIT_INPUT, EXIT_NUMERIC, EXIT_USAGE


class RosaError(Exception):
    """Base error; `details` is merged into the CLI's structured error output"""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "message": self.message, **self.details}


class RejectedInputError(RosaError, ValueError):
    """Dimension mismatch or out-of-range argument"""

    exit_code = EXIT_INPUT


class ParseError(RosaError):
    """Malformed or truncated file; `position` is the byte offset where parsing stopped"""

    exit_code = EXIT_INPUT

    def __init__(self, message: str, position: int, **details: Any):
        super().__init__(f"{message} (at byte {position})", position=position, **details)
        self.position = position


class SchemaError(RosaError):
    exit_code = EXIT_INPUT

    def __init__(self, message: str, tensor: Optional[str] = None, **details: Any):
        if tensor is not None:
            details["tensor"] = tensor
        super().__init__(message, **details)
        self.tensor = tensor


class InfeasibleCoefficientsError(RosaError, ArithmeticError):
    """Coefficients violate the sparsity constraints (exit code survives pydantic validation)"""

    exit_code = EXIT_NUMERIC


class ConvergenceError(RosaError, ArithmeticError):
    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, residual: float, **details: Any):
        super().__init__(message, residual=residual, **details)
        self.residual = residual


class UsageError(RosaError):
    exit_code = EXIT_USAGE
