"""Exception hierarchy shared by every subsystem."""


class SegVerifyError(Exception):
    """Base class; ``category`` is the machine-readable tag used by the CLI."""

    category = "error"


class ShapeError(SegVerifyError, ValueError):
    category = "shape"


class ParamError(SegVerifyError, ValueError):
    category = "param"


class TilingError(SegVerifyError, ValueError):
    category = "tiling"


class EmptyMaskError(SegVerifyError, ValueError):
    category = "empty_mask"


class TrainingError(SegVerifyError, RuntimeError):
    category = "training"


class ModelError(SegVerifyError, RuntimeError):
    category = "model"


class CalibrationError(SegVerifyError, ValueError):
    category = "calibration"


class GenError(SegVerifyError, RuntimeError):
    category = "generation"


class CorruptionError(SegVerifyError, RuntimeError):
    category = "corruption"


class IoError(SegVerifyError, OSError):
    category = "io"
