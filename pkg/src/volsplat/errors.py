"""Exception hierarchy shared by all stages."""


class VolsplatError(Exception):
    """Base class for all engine errors."""


class InvalidInputError(VolsplatError):
    """Caller violated a precondition (bad shapes, ranges, empty lists)."""


class BehindCameraError(VolsplatError):
    """Point has non-positive depth in the camera frame."""


class FormatError(VolsplatError):
    """A file on disk does not match its declared binary/JSON format."""


class WeightLoadError(VolsplatError):
    """Weight blob shapes or checksum do not match the network spec."""


class StageError(VolsplatError):
    """Wraps a failure inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
