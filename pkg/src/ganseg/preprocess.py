"""Image preprocessing applied before any model consumes a sample.

Fixed order: histogram equalization, gamma correction, then resize and
rescale to [-1, 1]. Masks are resized with nearest-neighbor so they stay
binary.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

N_BINS = 256


@dataclass(frozen=True)
class PreprocessConfig:
    resolution: int = 64
    gamma: float = 0.5
    equalize: bool = True

    def __post_init__(self):
        if self.resolution < 16 or (self.resolution & (self.resolution - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 16, "
                             f"got {self.resolution}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")


def equalize_histogram(image: np.ndarray) -> np.ndarray:
    """Map pixels through the 256-bin empirical CDF evaluated at bin midpoints.

    The mapping is monotone in the bin index; all pixels in one bin map to one
    value (ties share the bin-midpoint CDF). Constant images pass through
    unchanged (degenerate histogram).
    """
    image = np.asarray(image)
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    if image.max() == image.min():
        return image.copy()
    bins = np.clip((image * N_BINS).astype(np.int64), 0, N_BINS - 1)
    hist = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.float64)
    n = image.size
    cum = np.cumsum(hist)
    # CDF at the midpoint of each occupied bin: mass strictly below + half the
    # bin's own mass.
    midpoint_cdf = (cum - 0.5 * hist) / n
    return midpoint_cdf[bins].astype(image.dtype, copy=False)


def gamma_correct(image: np.ndarray, gamma: float) -> np.ndarray:
    """Pixelwise image**gamma; monotone and range-preserving on [0, 1]."""
    image = np.asarray(image)
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if image.min() < 0:
        raise ValueError("negative pixel values")
    return np.power(image, gamma).astype(image.dtype, copy=False)


def resize_normalize(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Bilinear resize to config.resolution then affine map [0,1] -> [-1,1]."""
    image = np.asarray(image, dtype=np.float32)
    res = config.resolution
    if image.shape != (res, res):
        image = cv2.resize(image, (res, res), interpolation=cv2.INTER_LINEAR)
    out = image * 2.0 - 1.0
    return np.clip(out, -1.0, 1.0)


def resize_mask(mask: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbor mask resize; output stays in {0, 1}."""
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape != (resolution, resolution):
        mask = cv2.resize(mask, (resolution, resolution),
                          interpolation=cv2.INTER_NEAREST)
    return mask


def preprocess_image(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Full pipeline: equalize -> gamma -> resize/normalize. Output in [-1, 1]."""
    out = np.asarray(image, dtype=np.float32)
    if config.equalize:
        out = equalize_histogram(out)
    out = gamma_correct(out, config.gamma)
    return resize_normalize(out, config)


def preprocess_partition(partition, config: PreprocessConfig):
    """Preprocess every sample; returns (images, masks, samples).

    images: N x H x W float32 in [-1, 1]; masks: N x H x W uint8 or None where
    a sample has no mask.
    """
    images = np.stack([preprocess_image(s.pixels, config) for s in partition.samples])
    masks = [None if s.mask is None else resize_mask(s.mask, config.resolution)
             for s in partition.samples]
    return images, masks, partition.samples
