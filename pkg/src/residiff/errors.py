"""Error taxonomy shared across modules; mapped to CLI exit codes."""


class ResidiffError(Exception):
    """Base class for package errors."""


class ConfigError(ResidiffError):
    """Invalid configuration or parameter values (CLI exit code 2)."""


class DataError(ResidiffError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class NumericError(ResidiffError):
    """Numerical failure such as divergence during training (CLI exit code 4)."""
