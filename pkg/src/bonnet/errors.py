"""Exception hierarchy shared across the toolkit."""


class BonnetError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(BonnetError):
    """Tensor extents or channel counts do not line up."""


class ConfigError(BonnetError):
    """A configuration value violates its invariant."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class MissingConfigFile(ConfigError):
    pass


class ConfigParseError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class UnsupportedOpError(BonnetError):
    """An op kind has no registered forward or backward rule."""


class DatasetError(BonnetError):
    pass


class StreamError(BonnetError):
    """A prefetch producer failed; surfaced on the consumer side."""


class FreezeError(BonnetError):
    pass


class CorruptFileError(BonnetError):
    """Checksum mismatch or malformed binary container."""


class IncompatibleBackendError(BonnetError):
    """Requested backend cannot execute the requested model variant."""


class UndefinedMetricsError(BonnetError):
    """Confusion matrix holds no pixels; metrics are undefined."""


class TrainingError(BonnetError):
    pass
