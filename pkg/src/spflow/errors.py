"""Exception types shared across the package.

CLI exit codes: 0 success, 2 usage (argparse), 3 DataError, 4 NumericError.
"""


class DataError(Exception):
    """Malformed, truncated, or non-finite input data."""


class NumericError(Exception):
    """NaN/Inf encountered where the contract requires finite values."""
