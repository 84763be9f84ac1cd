class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class DataError(ValueError):
    """Input data is empty, malformed or inconsistent."""


class FormatError(ValueError):
    """A binary container or checkpoint could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedMetric(ValueError):
    """A metric has no defined value for the given inputs (e.g. CCC of a constant series)."""


class TrainingDivergence(RuntimeError):
    """The training loss became non-finite."""
