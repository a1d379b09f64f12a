"""Exception types shared across the package.

The CLI maps any CmtlError to exit code 1; argparse usage problems exit 2.
"""


class CmtlError(Exception):
    """Base class for all errors raised by this package."""


class InputError(CmtlError):
    """A runtime input violates an operation's contract (bad dims, bounds, ...)."""


class ConfigError(CmtlError):
    """A configuration value is invalid or internally inconsistent."""


class DataError(CmtlError):
    """A dataset manifest or referenced file could not be loaded."""


class CheckpointError(CmtlError):
    """A model checkpoint is missing, corrupt, or shape-incompatible."""


class NumericError(CmtlError):
    """A non-finite value appeared where finite math was required."""
