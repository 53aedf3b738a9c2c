"""Exception types shared across the package."""


class PoseFusionError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PoseFusionError, ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(PoseFusionError):
    """Network/config shape mismatch or incompatible checkpoint."""


class EmptyMaskError(PoseFusionError):
    """The visible object mask has no pixels; no crop can be produced."""


class UndefinedOcclusionError(PoseFusionError):
    """Occlusion rate is undefined because the full object mask is empty."""


class CorruptDataError(PoseFusionError):
    """A stored frame or sequence failed integrity checks."""


class UnsupportedVersionError(PoseFusionError):
    """On-disk format version not understood by this build."""


class RenderError(PoseFusionError):
    """The scene cannot be rendered (e.g. object behind the camera)."""
