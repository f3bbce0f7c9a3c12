"""Exception types shared across the package."""


class DataError(ValueError):
    """Bad or inconsistent input data (shapes, files, parameter ranges)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or an undefined result."""
