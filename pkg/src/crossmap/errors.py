"""Exception hierarchy shared by all crossmap modules."""


class CrossmapError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CrossmapError, ValueError):
    pass


class SizeError(CrossmapError, ValueError):
    pass


class FormatError(CrossmapError, ValueError):
    """Malformed file. ``field`` names the offending header/payload field."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DegenerateClassError(CrossmapError, ValueError):
    pass


class RangeError(CrossmapError, ValueError):
    pass


class ShapeError(CrossmapError, ValueError):
    pass


class BatchSizeError(CrossmapError, ValueError):
    pass


class CacheError(CrossmapError, RuntimeError):
    pass


class NumericError(CrossmapError, ArithmeticError):
    pass


class DeterminismError(CrossmapError, RuntimeError):
    pass


class StateError(CrossmapError, RuntimeError):
    pass


class ConditioningError(CrossmapError, ArithmeticError):
    pass


class ExperimentAborted(CrossmapError, RuntimeError):
    pass


class ConditioningWarning(UserWarning):
    """Emitted when an eigenvalue floor had to be applied."""
