"""Exception types shared across the package."""


class HasZslError(Exception):
    """Base class for all package errors."""


class DimensionError(HasZslError, ValueError):
    """Operand shapes do not agree."""


class ContractError(HasZslError, ValueError):
    """An operation precondition was violated."""


class ConfigError(HasZslError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(HasZslError, ArithmeticError):
    """A loss or gradient became non-finite."""


class FormatError(HasZslError, ValueError):
    """A file on disk is corrupt, truncated or inconsistent."""


class UnsupportedVersionError(FormatError):
    """A file declares a schema version this code cannot read."""
