"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, I/O and file-format problems with 3, numeric divergence with 4.
"""


class DffError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DffError, ValueError):
    """Invalid configuration value or flag combination."""


class DimensionError(DffError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericError(DffError, ArithmeticError):
    """Non-finite values encountered (NaN/Inf) or training diverged."""


class FileFormatError(DffError):
    """A file does not conform to its declared on-disk format."""
