"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class UsageError(ValueError):
    """An API was called in a way its contract forbids."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """A numeric input is outside the mathematical domain of the op."""


class DataFormatError(ValueError):
    """A serialized record is malformed; message names the field and line."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""
