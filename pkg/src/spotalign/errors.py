"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the classes below rather than raising bare ValueError.
"""


class SpotAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(SpotAlignError):
    """Operands have incompatible shapes; the message reports both."""


class ContractError(SpotAlignError):
    """A documented precondition was violated by the caller."""


class ConfigError(SpotAlignError):
    """Invalid or unknown configuration key/value."""


class DataError(SpotAlignError):
    """Input files are missing, malformed, or mutually inconsistent."""


class NumericError(SpotAlignError):
    """A non-finite value appeared where the pipeline requires finite ones."""
