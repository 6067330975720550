"""Exception hierarchy shared by the library and the command line."""


class CnrError(Exception):
    """Base class for all package errors."""


class SchemaError(CnrError, ValueError):
    """Malformed input file or configuration."""


class NumericError(CnrError, ArithmeticError):
    """A numerical routine failed (factorization, optimizer, ...)."""


class FactorizationError(NumericError):
    """Matrix could not be Cholesky-factorized even after jitter."""


class OptimizerError(NumericError):
    """Maximization produced no finite objective value."""


class DegenerateInputError(CnrError, ValueError):
    """Data carry no usable information (constant vector, empty set, ...)."""


class RankDeficientError(DegenerateInputError):
    """Design matrix lacks full column rank.

    ``columns`` names the columns involved in the dependency.
    """

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ReplicateFailure(NumericError):
    """A bootstrap or simulation replicate could not be completed."""
