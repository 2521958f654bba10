"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not chain or do not match."""


class NumericError(FloatingPointError):
    """A computation produced non-finite values or would divide by ~zero."""

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class TrainingError(RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ParseError(ValueError):
    """Malformed point-cloud or tensor file."""


class ConfigError(RuntimeError):
    """Missing or inconsistent run configuration (e.g. absent checkpoint)."""
