"""Exception types shared across the package."""


class DataError(ValueError):
    """Invalid or unparseable input data."""


class ConfigError(ValueError):
    """Invalid run configuration."""


class FitError(RuntimeError):
    """Numerical fitting or sampling failure."""
