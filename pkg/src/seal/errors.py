"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage/config problems exit 1, bad input
data exits 2 and numerical failures exit 3.
"""


class SealError(Exception):
    """Base class for all package errors."""


class ConfigError(SealError, ValueError):
    """Invalid or unknown configuration value."""


class DataError(SealError, ValueError):
    """Malformed, inconsistent or degenerate input data."""


class NumericalError(SealError, ArithmeticError):
    """Singular flow, non-finite loss or an ill-posed linear system."""


class IntegrityError(DataError):
    """On-disk container failed a version, length or digest check."""
