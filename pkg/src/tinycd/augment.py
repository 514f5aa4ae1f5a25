"""Paired augmentation: geometric transforms hit both images and the mask with
one shared draw; photometric transforms are drawn per image and never touch the
mask.  Masks resample with nearest neighbor so they stay binary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import SamplePair
from .errors import ConfigurationError, TinyCDError


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    rotation_prob: float = 0.5
    blur_prob: float = 0.3
    brightness_contrast_prob: float = 0.3
    rotation_max_degrees: float = 360.0
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "rotation_prob", "blur_prob", "brightness_contrast_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.rotation_max_degrees <= 360.0:
            raise ConfigurationError(
                f"rotation_max_degrees must lie in (0, 360], got {self.rotation_max_degrees}"
            )
        if not 0.0 < self.blur_sigma_min <= self.blur_sigma_max:
            raise ConfigurationError(
                f"need 0 < blur_sigma_min <= blur_sigma_max, got {self.blur_sigma_min}/{self.blur_sigma_max}"
            )


def _rotate(channels: np.ndarray, angle: float, order: int) -> np.ndarray:
    # zero fill outside the frame; order 0 keeps masks binary, order 1 for images
    return ndimage.rotate(
        channels, angle, axes=(1, 2), reshape=False, order=order, mode="constant", cval=0.0
    )


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    # kernel radius ceil(2*sigma) matches a 2*ceil(2*sigma)+1 sized window
    return ndimage.gaussian_filter(image, sigma=(0.0, sigma, sigma), truncate=2.0)


def _brightness_contrast(image: np.ndarray, rng: np.random.Generator, cfg: AugmentationConfig) -> np.ndarray:
    contrast = 1.0 + rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
    brightness = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
    return np.clip(image * contrast + brightness, 0.0, 1.0)


def _photometric(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < cfg.blur_prob:
        image = _blur(image, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
    if rng.random() < cfg.brightness_contrast_prob:
        image = _brightness_contrast(image, rng, cfg)
    return image


def augment_pair(sample: SamplePair, cfg: AugmentationConfig, rng: np.random.Generator) -> SamplePair:
    """One augmented copy of a sample; the input arrays are never modified."""
    img1 = sample.reference
    img2 = sample.comparison
    label = sample.label

    if rng.random() < cfg.flip_prob:  # X axis: mirror left/right
        img1, img2, label = (np.ascontiguousarray(a[..., ::-1]) for a in (img1, img2, label))
    if rng.random() < cfg.flip_prob:  # Y axis: mirror top/bottom
        img1, img2, label = (np.ascontiguousarray(a[:, ::-1, :]) for a in (img1, img2, label))
    if rng.random() < cfg.rotation_prob:
        angle = rng.uniform(0.0, cfg.rotation_max_degrees)
        img1 = _rotate(img1, angle, order=1)
        img2 = _rotate(img2, angle, order=1)
        label = _rotate(label, angle, order=0)
        if not np.all((label == 0) | (label == 1)):
            raise TinyCDError("internal: mask became non-binary after geometric transform")

    img1 = _photometric(img1, cfg, rng)
    img2 = _photometric(img2, cfg, rng)

    return SamplePair(
        reference=np.clip(img1, 0.0, 1.0).astype(np.float32),
        comparison=np.clip(img2, 0.0, 1.0).astype(np.float32),
        label=label.astype(np.float32),
        id=sample.id,
    )


def sample_rng(global_seed: int, epoch: int, sample_index: int) -> np.random.Generator:
    """Independent per-sample stream so augmentation order and worker count do not matter."""
    return np.random.default_rng([global_seed, epoch, sample_index])
