"""Exception types shared across the toolkit.

Every failure mode that callers are expected to handle gets its own class;
generic ValueError/RuntimeError are reserved for programming mistakes.
"""


class TevError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(TevError):
    """Array shapes are inconsistent with the operation's contract."""


class ConfigurationError(TevError):
    """A config value is outside its documented range."""


class StateError(TevError):
    """An object was used in a way its lifecycle forbids."""


class TrainingError(TevError):
    """Optimization failed (non-finite gradients, impossible schedule, ...)."""


class LabelError(TevError):
    """A label or one-hot encoding is malformed."""


class TrackingLossError(TevError):
    """Too many markers could not be matched between frames."""


class DegenerateFieldError(TevError):
    """Not enough valid markers to interpolate a displacement field."""


class StratificationError(TevError):
    """A dataset split cannot honor the stratification contract."""


class MetricError(TevError):
    """A metric was invoked with arguments that make it undefined."""


class FormatError(TevError):
    """A serialized file is malformed.

    `offset` is the byte position at which the problem was detected,
    or None when the file could not be read at all.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
