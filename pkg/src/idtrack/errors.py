"""Exception types shared across the package."""


class IDTrackError(Exception):
    """Base class for all package errors."""


class ConfigError(IDTrackError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class GenerationError(IDTrackError):
    pass


class FormatError(IDTrackError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DimensionError(IDTrackError, ValueError):
    pass


class StateError(IDTrackError):
    pass


class CapacityError(IDTrackError):
    pass


class TemporalOrderError(IDTrackError, ValueError):
    pass


class EmptyMemoryError(IDTrackError):
    pass


class NumericError(IDTrackError, FloatingPointError):
    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class CheckpointError(IDTrackError):
    pass


class UndefinedMetricError(IDTrackError, ZeroDivisionError):
    pass
