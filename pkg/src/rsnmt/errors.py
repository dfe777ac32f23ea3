class RsnmtError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(RsnmtError, ValueError):
    pass


class ConfigError(RsnmtError, ValueError):
    pass


class ParameterError(RsnmtError, ValueError):
    pass


class OutOfVocabularyError(RsnmtError, IndexError):
    pass


class NumericalError(RsnmtError, FloatingPointError):
    """NaN or otherwise unusable values reached an operation."""


class TrainingDiverged(RsnmtError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CheckpointError(RsnmtError, ValueError):
    pass


class StageError(RsnmtError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
