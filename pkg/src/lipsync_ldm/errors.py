"""Exception hierarchy shared by every stage of the pipeline."""


class LipSyncError(Exception):
    """Base class for all package errors."""


class ConfigError(LipSyncError, ValueError):
    pass


class IngestError(LipSyncError):
    pass


class QualityError(LipSyncError):
    pass


class GeometryError(LipSyncError, ValueError):
    pass


class BoundsError(LipSyncError, IndexError):
    pass


class NumericError(LipSyncError, ArithmeticError):
    pass


class ShapeError(LipSyncError, ValueError):
    pass


class TrainingDiverged(LipSyncError):
    """Raised when a loss becomes non-finite; carries the last good checkpoint."""

    def __init__(self, message, last_good_checkpoint=None, component=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint
        self.component = component


class IncompatibleWeights(LipSyncError):
    pass
