"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (bad key, bad value, inconsistent options)."""


class NumericalError(RuntimeError):
    """Numerical failure during solving or sampling."""


class SolverConvergenceError(NumericalError):
    """Iterative solver exhausted its iteration budget."""


class SingularOperatorError(NumericalError):
    """Direct solve requested for a (near-)singular operator."""


class BlowUpError(NumericalError):
    """Non-finite values encountered during time stepping or sampling."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
