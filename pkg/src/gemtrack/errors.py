"""Exception hierarchy shared by all gemtrack modules."""


class GemError(Exception):
    """Base class for every error raised by gemtrack."""


class NonStochastic(GemError, ValueError):
    """A transition matrix has a negative entry or a row not summing to one."""


class EmptyMatrix(GemError, ValueError):
    """A transition matrix with zero states was requested."""


class NoConvergence(GemError, RuntimeError):
    """Power iteration did not settle (reducible or periodic chain)."""


class CholeskyFailure(GemError, ArithmeticError):
    """A covariance matrix could not be factorized even after jitter."""


class SingularCovariance(CholeskyFailure):
    """A covariance used in a likelihood evaluation is singular."""


class SingularInnovation(GemError, ArithmeticError):
    """The estimator's innovation matrix is not invertible."""


class DegenerateFilter(GemError, ArithmeticError):
    """Every filter weight vanished."""


class DimensionMismatch(GemError, ValueError):
    """Arrays handed to an operation disagree in shape."""


class InvalidIndex(GemError, ValueError):
    """A step-size schedule was evaluated below index 1."""


class ParseError(GemError, ValueError):
    """A scenario configuration could not be read."""


class ValidationError(GemError, ValueError):
    """A scenario configuration is well-formed but infeasible."""
