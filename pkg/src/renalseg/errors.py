"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class NiftiParseError(EngineError, ValueError):
    """Malformed NIfTI byte stream (bad magic, truncated payload, ...)."""


class UnsupportedFormatError(EngineError, ValueError):
    """Well-formed file using a feature we deliberately do not support."""


class DimensionalityError(EngineError, ValueError):
    """Volume is not a plain 3D grid."""


class DataQualityError(EngineError, ValueError):
    """Stored voxel data violates a quality contract (NaN/Inf, bad codes)."""


class EmptyForegroundError(EngineError, ValueError):
    """No foreground voxels available for statistics."""


class ZeroVarianceError(EmptyForegroundError):
    """Foreground intensities are constant; z-scoring is undefined."""


class ConfigError(EngineError, ValueError):
    """Invalid configuration. ``key_path`` names the offending entry."""

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class StageError(EngineError, RuntimeError):
    """A pipeline stage failed for one case.

    Carries the stage id and, for patch-level failures, the patch index.
    """

    def __init__(self, stage_id: str, message: str, patch_index: int | None = None):
        self.stage_id = stage_id
        self.patch_index = patch_index
        where = stage_id if patch_index is None else f"{stage_id}[patch {patch_index}]"
        super().__init__(f"{where}: {message}")


class PredictorError(EngineError, RuntimeError):
    """The predictor backing a stage misbehaved (protocol or I/O failure)."""
