"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see cli.EXIT_CODES).
"""


class DivseedError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DivseedError):
    """Invalid or inconsistent configuration / arguments."""


class DataError(DivseedError):
    """Dataset, manifest, or label problems (missing models, bad tags, ...)."""


class NumericError(DivseedError):
    """Non-finite values encountered where finiteness is guaranteed."""


class TensorFormatError(DivseedError):
    """Malformed tensor file: bad magic, truncation, unsupported dims."""
