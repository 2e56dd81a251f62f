"""Exception taxonomy shared across the library.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericFault -> 4.
"""


class GlenetError(Exception):
    """Base class for all library errors."""


class ConfigError(GlenetError):
    """Invalid configuration: bad hyperparameter, unknown key, unusable mode."""


class DataError(GlenetError):
    """Malformed or unusable input data (files, records, datasets)."""


class DegenerateInputError(DataError):
    """Input too small or too degenerate for the operation (empty cloud,
    collinear point set, ...)."""


class DomainError(GlenetError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class ShapeError(GlenetError, ValueError):
    """Structurally incompatible tensor shapes."""


class NumericFault(GlenetError, ArithmeticError):
    """A forward pass or training step produced NaN/Inf."""


class UnsupportedModeError(ConfigError):
    """Requested operation is not defined for the given mode."""
