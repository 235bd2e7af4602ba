"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not conform."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class ParseError(ValueError):
    """Malformed input file; message carries the position."""


class TrainingError(RuntimeError):
    """Training diverged; message names the epoch and batch."""


class MetricError(ValueError):
    """A metric was requested on data it is undefined for."""
