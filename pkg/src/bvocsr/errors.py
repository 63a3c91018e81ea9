"""Exception hierarchy.

The CLI maps each family to an exit code: configuration problems exit 1,
bad or missing input data exit 2, numerical failures exit 3.
"""


class BVOCSRError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(BVOCSRError):
    exit_code = 1


class DataError(BVOCSRError):
    exit_code = 2


class MissingVariableError(DataError):
    pass


class NonUniformGridError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class ExtentError(DataError):
    """Raised for incompatible, non-overlapping or mis-registered extents."""


class NumericalError(BVOCSRError):
    exit_code = 3
