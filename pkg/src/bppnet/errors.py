class BPPNetError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(BPPNetError, ValueError):
    pass


class DimensionError(BPPNetError, ValueError):
    pass


class CheckpointError(BPPNetError):
    pass


class DatasetError(BPPNetError):
    pass


class TrainingDiverged(BPPNetError):
    pass
