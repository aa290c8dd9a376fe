"""Exception types shared across the package."""


class LpmiError(Exception):
    """Base class for package errors."""


class ConfigurationError(LpmiError):
    """Invalid user configuration: bad column names, sizes, option values."""


class DataError(LpmiError):
    """Malformed or inconsistent input data."""


class NumericalError(LpmiError):
    """Numerical failure (non-PD matrix after jitter, NaN in a Gibbs block)."""


class PoolingError(LpmiError):
    """Multiple-imputation pooling cannot be performed (e.g. M < 2)."""
