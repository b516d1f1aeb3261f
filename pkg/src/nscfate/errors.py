"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(PipelineError):
    """Invalid configuration value or key."""

    exit_code = 2


class DataError(PipelineError):
    """Problems with datasets, manifests, or labels."""

    exit_code = 3


class MissingClassError(DataError):
    """A taxonomy class has no matching subdirectory on disk."""


class EmptyClassError(DataError):
    """A class subdirectory exists but contains no decodable image."""


class StratificationError(DataError):
    """A class has too few samples to populate every nonzero split."""


class InvalidImageError(DataError):
    """Image cannot be preprocessed (e.g. zero area)."""


class LabelRangeError(DataError):
    """Label index outside the taxonomy range."""


class SplitError(DataError):
    """A required split is empty or too small."""


class ArchetypeError(DataError):
    """Class label does not map to a known morphology archetype."""


class GeometryError(DataError):
    """Synthetic cell geometry does not fit the requested image."""


class NotFoundError(DataError):
    """A requested sample id does not exist in the manifest."""


class NumericError(PipelineError):
    """Non-finite values where finite ones are required."""

    exit_code = 4


class ShapeError(NumericError):
    """Array shape does not match the expected contract."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class DegenerateClassError(NumericError):
    """ROC requested for a truth vector containing a single class."""


class IoError(PipelineError):
    """File could not be written or read."""

    exit_code = 5


class WeightArtifactError(IoError):
    """Pretrained backbone weights missing or checksum mismatch."""


class CorruptCheckpointError(IoError):
    """Checkpoint file failed its integrity check."""


class CompatibilityError(ConfigError):
    """Checkpoint config/taxonomy does not match what the caller expects."""


class LayerNotFoundError(ConfigError):
    """Requested layer id is not in the model's layer registry."""
