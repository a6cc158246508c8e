"""Exception types shared across the package.

The split mirrors the CLI exit-code contract: configuration problems,
data validation problems, and numerical failures are reported with
distinct exit codes, so they need distinct exception classes.
"""


class CrtPermError(Exception):
    """Base class for all package errors."""


class ConfigError(CrtPermError, ValueError):
    """Invalid or incomplete configuration (CLI exit code 2)."""


class DataValidationError(CrtPermError, ValueError):
    """Input data violates a dataset invariant (CLI exit code 3)."""


class DesignError(DataValidationError):
    """Treatment pattern is not a supported randomisation scheme."""


class NumericalError(CrtPermError, RuntimeError):
    """Numerical failure: non-convergence, separation, singular or
    degenerate quantities (CLI exit code 4)."""
