"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. ShapeError is a contract violation raised by tensor
and model code; when it reaches the CLI it indicates a config/corpus
mismatch and is reported as a config error.
"""


class UnistError(Exception):
    """Base class for all package errors."""


class ShapeError(UnistError):
    """Operands with incompatible shapes or invalid axes."""


class ConfigError(UnistError):
    """Invalid or inconsistent configuration."""


class DataError(UnistError):
    """Corpus files that are missing, malformed, or self-inconsistent."""


class NumericalError(UnistError):
    """NaN or divergence encountered where finite values are required."""
