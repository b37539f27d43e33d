"""Exception types shared across the pipeline."""


class WildcountError(Exception):
    """Base class for all library errors."""


class TransformError(WildcountError):
    """Geotransform is singular or otherwise unusable."""


class TilingError(WildcountError):
    """Image cannot be tiled under the given parameters."""


class ConfigError(WildcountError):
    """Invalid configuration value or combination."""


class SplitInfeasibleError(WildcountError):
    """Herd-coverage constraints cannot be satisfied by any assignment."""

    def __init__(self, herd: str, message: str):
        super().__init__(message)
        self.herd = herd


class CheckpointError(WildcountError):
    """Weight file does not match the target architecture."""

    def __init__(self, message: str, missing=(), unexpected=(), mismatched=()):
        super().__init__(message)
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)


class TransferError(WildcountError):
    """Backbone configurations disagree between source and target."""


class TrainingError(WildcountError):
    """Training could not start or complete."""


class DivergenceError(TrainingError):
    """Loss became NaN/Inf during training."""


class PlacementError(WildcountError):
    """Synthetic scene cannot place animals within the occlusion budget."""


class CalibrationError(WildcountError):
    """Operating-point calibration received unusable inputs."""
