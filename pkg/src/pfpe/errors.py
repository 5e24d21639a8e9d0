"""Exception types raised across the package."""


class PfpeError(Exception):
    """Base class for all package errors."""


class InvalidDistribution(PfpeError, ValueError):
    pass


class DimensionMismatch(PfpeError, ValueError):
    pass


class NonErgodic(PfpeError):
    pass


class Diverged(PfpeError):
    """Raised when the parameter norm exceeds the blow-up threshold.

    The partial trace recorded up to the failure is attached as ``trace``.
    """

    def __init__(self, message, trace=None, step=None):
        super().__init__(message)
        self.trace = trace
        self.step = step


class CalledOffSchedule(PfpeError):
    pass


class SingularGramMatrix(PfpeError):
    pass


class SingularSystem(PfpeError):
    def __init__(self, message, smallest_singular_value=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class SingularHessian(PfpeError):
    pass


class DegenerateEigenvalue(PfpeError):
    pass


class QuadratureUnconverged(PfpeError):
    def __init__(self, message, max_change=None):
        super().__init__(message)
        self.max_change = max_change


class EigenNotConverged(PfpeError):
    pass


class ConfigError(PfpeError, ValueError):
    pass
