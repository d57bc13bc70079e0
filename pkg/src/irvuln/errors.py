"""Exception types shared across the package."""


class DataError(Exception):
    """Bad input data: malformed records, digest mismatches, infeasible configs."""


class NumericError(Exception):
    """Numeric failure: non-finite loss, failed gradient verification."""
