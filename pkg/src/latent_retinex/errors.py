"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class TapeStateError(RuntimeError):
    """The differentiation tape was used in an invalid state."""
