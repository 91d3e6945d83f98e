# core/errors.py
from __future__ import annotations
from typing import Any, Optional


class RKHSFlowError(Exception):
    """Base class for every error raised by the library."""


class InvalidKernelError(RKHSFlowError, ValueError):
    pass


class InvalidDimensionError(RKHSFlowError, ValueError):
    pass


class ShapeError(RKHSFlowError, ValueError):
    pass


class InvalidInputError(RKHSFlowError, ValueError):
    pass


class DegenerateDataError(RKHSFlowError, ValueError):
    pass


class ConfigError(RKHSFlowError, ValueError):
    pass


class FormatError(RKHSFlowError, ValueError):
    pass


class FlowDivergenceError(RKHSFlowError, ArithmeticError):
    def __init__(self, step: int, norm: float):
        self.step = step
        self.norm = norm
        super().__init__(f"forward pass diverged at time step {step} (state norm {norm:.3e})")


class TrainingDivergedError(RKHSFlowError, ArithmeticError):
    def __init__(self, step: int, log: Optional[Any] = None, cause: Optional[FlowDivergenceError] = None):
        self.step = step
        self.log = log
        self.cause = cause
        detail = f" ({cause})" if cause else ""
        super().__init__(f"training diverged at GD step {step}{detail}")


# exit codes used by app.py
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, InvalidKernelError, InvalidDimensionError,
                        DegenerateDataError, InvalidInputError, FormatError, ShapeError)):
        return EXIT_INVALID
    return EXIT_FAILURE
