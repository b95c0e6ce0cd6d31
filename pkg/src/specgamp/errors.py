"""Exception types shared across the package."""


class SpecGampError(Exception):
    """Base class for errors raised deliberately by this package."""


class InvalidArgument(SpecGampError, ValueError):
    pass


class DomainError(SpecGampError, ValueError):
    """An argument lies outside the domain where a function is defined."""


class NumericError(SpecGampError, ArithmeticError):
    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class BracketError(SpecGampError, ValueError):
    pass


class AssumptionViolation(SpecGampError, RuntimeError):
    """A modelling assumption (named in the message) does not hold."""


class DivergenceError(SpecGampError, RuntimeError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class PerfectRecovery(Exception):
    """State evolution reached zero noise variance; iteration is terminal."""
