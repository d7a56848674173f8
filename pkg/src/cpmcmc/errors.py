from __future__ import annotations

from typing import Optional, Tuple


class ParameterError(ValueError):
    """An invalid model, kernel or layout parameter"""


class DataError(ValueError):
    """Observations that are non-finite or malformed"""


class CapabilityError(NotImplementedError):
    """The model or estimator does not support the requested operation"""


class DegenerateEstimateError(ArithmeticError):
    """
    Every importance weight at observation t (1-based) was zero, so the likelihood
    estimate is zero. Samplers treat a degenerate proposal as a rejection.
    """

    def __init__(self, t: int):
        super().__init__(f"All weights are zero at observation t={t}")
        self.t = t


class UndefinedIACTError(ValueError):
    """The integrated autocorrelation time is undefined for this series"""


class CalibrationRangeError(ValueError):
    def __init__(
        self, target: float, bracket: Tuple[float, float], reached: Tuple[float, float]
    ):
        super().__init__(
            f"Target kappa {target} is not reachable for psi in "
            f"[{bracket[0]}, {bracket[1]}]: kappa ranges over "
            f"[{reached[0]:.4g}, {reached[1]:.4g}]"
        )
        self.target = target
        self.bracket = bracket
        self.reached = reached


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class TraceSinkError(OSError):
    def __init__(self, path: str, iteration: Optional[int], cause: BaseException):
        super().__init__(
            f"Writing the trace to {path} failed at iteration {iteration}: {cause}"
        )
        self.path = path
        self.iteration = iteration


class InfiniteARCTError(ArithmeticError):
    """The relative computing time bound is infinite at kappa = 0"""
