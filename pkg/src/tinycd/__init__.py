"""Lightweight Siamese U-Net change detection on a self-contained autodiff core."""

from .errors import (
    CheckpointCompatibilityError,
    CheckpointFormatError,
    ConfigurationError,
    ImageFormatError,
    ManifestError,
    ShapeError,
    TinyCDError,
    UsageError,
    ValidationError,
)
from .tensor import (
    Parameter,
    Tensor,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
    set_deterministic,
    zero_grads,
)
from . import ops
from .gradcheck import grad_check, numerical_gradient, run_suite
from .model import ModelConfig, TinyCDModel, param_count

__version__ = "0.1.0"
