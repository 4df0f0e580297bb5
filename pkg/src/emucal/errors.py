"""Exception types shared across the package."""


class CalibrationError(Exception):
    """Base class for all errors raised by emucal."""


class ConfigurationError(CalibrationError, ValueError):
    """Inconsistent dimensions, invalid parameters or bad config files."""


class InsufficientDataError(CalibrationError, ValueError):
    pass


class IntegrationBlowupError(CalibrationError, FloatingPointError):
    """The ODE state became non-finite (or exceeded the blow-up threshold).

    Attributes
    ----------
    time : float
        Model time at which the blow-up was detected.
    """

    def __init__(self, time, message=None):
        self.time = float(time)
        super().__init__(message or f"integration blew up at t={self.time:.4f}")


class IllConditionedError(CalibrationError, ArithmeticError):
    """Cholesky factorization failed even after the maximum jitter."""


class DegenerateTargetError(CalibrationError, ValueError):
    """Log-target is -inf for every initial particle."""


class DesignSaturationError(CalibrationError):
    pass


class EmptyNROYError(CalibrationError):
    pass


class UnreliableEstimateError(CalibrationError):
    pass
