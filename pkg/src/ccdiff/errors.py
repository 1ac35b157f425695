"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1, NumericFailure -> 2.
"""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericFailure(RuntimeError):
    """Raised when a numeric certificate or sanity check fails."""
