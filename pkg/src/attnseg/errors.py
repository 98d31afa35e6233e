"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented preconditions."""


class ConfigError(ValueError):
    """Invalid model, training or data configuration."""


class FormatError(ValueError):
    """A file does not have the expected on-disk format."""


class UndefinedMetricError(ValueError):
    """The metric is not defined for the given inputs (e.g. an empty mask)."""
