"""Exception types shared across the pipeline."""


class ShapelockError(Exception):
    """Base class for all pipeline errors."""


class DomainMismatchError(ShapelockError):
    """Image is not in the value domain an operation requires."""


class DimensionMismatchError(ShapelockError):
    """Two grids that must share a shape do not."""


class ConstantImageError(ShapelockError):
    """Image has (near-)zero variance, z-scoring is undefined."""


class ParameterError(ShapelockError):
    """Invalid operation parameter (e.g. non-positive sigma)."""


class NoBodyError(ShapelockError):
    """Body-region selection found nothing above the threshold."""


class NoRibsError(ShapelockError):
    """Rib-cage segmentation came out empty after opening."""


class EmptyMaskError(ShapelockError):
    """Mask has no true pixels where at least one is required."""


class EmptyRegionError(ShapelockError):
    """Masked loss region contains zero pixels."""


class PhantomSpecError(ShapelockError):
    """Phantom geometry is inconsistent (e.g. lungs outside body)."""


class DatasetSizeError(ShapelockError):
    """Requested dataset cannot satisfy the split proportions."""


class DataError(ShapelockError):
    """Manifest or on-disk dataset is unusable."""


class ConfigError(ShapelockError):
    """Invalid pipeline configuration."""


class TrainingDivergedError(ShapelockError):
    """Non-finite values appeared in model parameters or losses."""
