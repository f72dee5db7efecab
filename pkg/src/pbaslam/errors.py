"""Exception types shared across the package."""


class PbaSlamError(Exception):
    pass


class ProjectionError(PbaSlamError):
    """Point at or behind the camera plane."""


class InvalidInverseDepth(PbaSlamError):
    pass


class DegenerateInput(PbaSlamError):
    pass


class ImageSizeError(PbaSlamError):
    pass


class SampleError(PbaSlamError):
    """Sampling or gradient request outside the usable image area."""


class InsufficientData(PbaSlamError):
    pass


class FitFailure(PbaSlamError):
    def __init__(self, message, fallback=None):
        super().__init__(message)
        self.fallback = fallback


class SolverFailure(PbaSlamError):
    pass


class AlignmentError(PbaSlamError):
    pass


class TrackingLost(PbaSlamError):
    pass


class BootstrapFailure(PbaSlamError):
    pass


class ConfigError(PbaSlamError):
    pass


class DatasetError(PbaSlamError):
    pass


class EmptySequence(DatasetError):
    pass


class MissingFile(DatasetError):
    pass


class NonMonotonicTimestamps(DatasetError):
    pass


class CalibrationError(DatasetError):
    pass


class InvalidObservation(PbaSlamError):
    """No pattern pixel of an observation produced a valid residual."""
