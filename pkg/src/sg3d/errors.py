"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 2, DataError -> 3, NumericError -> 4.
"""


class Sg3dError(Exception):
    """Base class for all package errors."""


class ConfigError(Sg3dError):
    """Invalid or inconsistent configuration."""


class DataError(Sg3dError):
    """Malformed or contract-violating data (scene files, dumps, vocabularies)."""


class DimensionError(Sg3dError):
    """Tensor shape mismatch at an op boundary."""


class ContractError(Sg3dError):
    """An op precondition was violated (e.g. non-scalar loss for backward)."""


class NumericError(Sg3dError):
    """Non-finite value detected during computation."""
