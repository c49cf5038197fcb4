"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: DataError -> 2, NumericError -> 3.
Usage errors (bad flags) are handled by the CLI itself and exit 1.
"""


class DataError(ValueError):
    """Malformed or inconsistent input data (files, schemas, shapes)."""


class NumericError(RuntimeError):
    """Numeric failure: divergence, non-finite values, non-convergence."""
