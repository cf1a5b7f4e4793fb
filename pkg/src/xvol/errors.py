"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataFormatError -> 2,
NumericError -> 3.
"""


class XvolError(Exception):
    pass


class ShapeError(XvolError):
    """Tensor extents incompatible with an operation's contract."""


class ConfigError(XvolError):
    """Invalid configuration or usage."""


class DataFormatError(XvolError):
    """Malformed or truncated file content."""


class NumericError(XvolError):
    """Non-finite value where a finite one is required."""
