"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, bad input
data exits 3.
"""


class SSOCLError(Exception):
    pass


class ConfigError(SSOCLError):
    """Inconsistent or unknown configuration."""


class DataError(SSOCLError):
    """Malformed segment files, shape mismatches on input, missing metadata."""


class ContractError(SSOCLError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NumericalError(SSOCLError, FloatingPointError):
    """A tensor operation produced NaN or Inf."""


class ClusteringError(SSOCLError):
    pass


class MappingError(SSOCLError):
    pass
