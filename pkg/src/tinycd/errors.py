"""Exception types shared across the toolkit."""


class TinyCDError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TinyCDError, ValueError):
    """Tensor dimensions are incompatible with an operation."""


class ConfigurationError(TinyCDError, ValueError):
    """A configuration value is invalid (bad groups, strides, enum, ...)."""


class ValidationError(TinyCDError, ValueError):
    """Input data violates a documented precondition (non-binary mask, ...)."""


class UsageError(TinyCDError, RuntimeError):
    """An API was called out of contract (backward on non-scalar, step without grads, ...)."""


class ManifestError(TinyCDError, ValueError):
    """A dataset directory is inconsistent (missing counterpart files, ...)."""


class ImageFormatError(TinyCDError, ValueError):
    """An image file could not be decoded."""


class CheckpointFormatError(TinyCDError, ValueError):
    """A checkpoint file is corrupt, truncated, or has the wrong magic/version."""


class CheckpointCompatibilityError(TinyCDError, ValueError):
    """A checkpoint does not match the current model configuration."""
