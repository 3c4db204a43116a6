"""Exception hierarchy shared by every module of the package."""


class UTAEPaPsError(Exception):
    """Base class for all package errors."""


class EmptyBatch(UTAEPaPsError, ValueError):
    pass


class ShapeMismatch(UTAEPaPsError, ValueError):
    pass


class ShapeError(UTAEPaPsError, ValueError):
    pass


class DegenerateStats(UTAEPaPsError, ValueError):
    pass


class DegenerateSequence(UTAEPaPsError, ValueError):
    pass


class EmptyLayout(UTAEPaPsError, RuntimeError):
    pass


class DatasetIndexError(UTAEPaPsError, LookupError):
    """Missing or corrupt dataset metadata; carries the offending path."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class FormatError(UTAEPaPsError, ValueError):
    pass


class InvalidFold(UTAEPaPsError, ValueError):
    pass


class EmptyTrainingSet(UTAEPaPsError, ValueError):
    pass


class SizeError(UTAEPaPsError, ValueError):
    pass


class ThresholdError(UTAEPaPsError, ValueError):
    pass


class EmptyEvaluation(UTAEPaPsError, ValueError):
    pass


class ConfigError(UTAEPaPsError, ValueError):
    pass


class IncompatibleCheckpoint(UTAEPaPsError, ValueError):
    pass


class UnknownAblation(ConfigError):
    pass


class Divergence(UTAEPaPsError, RuntimeError):
    pass
