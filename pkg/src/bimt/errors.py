class BimtError(Exception):
    """Base class for all package errors."""


class ConfigError(BimtError, ValueError):
    pass


class DataError(BimtError, ValueError):
    pass


class VocabMismatchError(DataError):
    pass


class ShapeError(BimtError, ValueError):
    pass


class NumericFault(BimtError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""
