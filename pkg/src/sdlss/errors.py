"""Exception types shared across the package."""


class SdlssError(Exception):
    """Base class for all package errors."""


class DimensionError(SdlssError, ValueError):
    """Operand shapes do not conform."""


class ConfigError(SdlssError, ValueError):
    """Invalid configuration value."""


class ContractError(SdlssError, RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class NonFiniteError(SdlssError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class FormatError(SdlssError, ValueError):
    """Malformed file (IDX, checkpoint, image)."""


class BudgetError(SdlssError, RuntimeError):
    """Exact enumeration refused because it exceeds the configured budget."""
