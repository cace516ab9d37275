"""Exception hierarchy.

Two families: :class:`ValidationError` for bad inputs (CLI exit code 1) and
:class:`NumericalFault` for failures during a computation (CLI exit code 2).
"""


class TEMeanVarError(Exception):
    """Base class for all package errors."""


class ValidationError(TEMeanVarError, ValueError):
    pass


class NumericalFault(TEMeanVarError, ArithmeticError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DegenerateCovariance(ValidationError):
    pass


class InvalidCorrelation(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class OutOfHorizon(OutOfRange):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptySeries(ValidationError):
    pass


class PsdRepairFailure(ValidationError):
    pass


class ErcNonConvergence(NumericalFault):
    pass


class NonPositiveK(NumericalFault):
    pass


class SingularS(NumericalFault):
    pass


class NonFinitePath(NumericalFault):
    def __init__(self, message, path_index=None):
        super().__init__(message)
        self.path_index = path_index


class ZeroVolatility(NumericalFault):
    pass
