"""Exception types shared across the package."""


class ChannelKANError(Exception):
    pass


class DimensionError(ChannelKANError, ValueError):
    """Array shape or axis inconsistent with the operation."""


class ConfigError(ChannelKANError, ValueError):
    pass


class EmptyDatasetError(ChannelKANError, ValueError):
    pass


class DatasetFormatError(ChannelKANError):
    """Base class for on-disk format problems (datasets and checkpoints)."""


class MalformedHeaderError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class ConfigMismatchError(ChannelKANError, ValueError):
    """A file's stored configuration disagrees with the runtime one."""


class UndefinedNormalizationError(ChannelKANError, ZeroDivisionError):
    pass


class DivergenceError(ChannelKANError, FloatingPointError):
    def __init__(self, epoch, batch, value):
        super().__init__(f"loss became non-finite ({value}) at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
