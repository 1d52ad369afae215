"""
rccformer.data.augment - Training-time random crop and horizontal flip

Dots outside the crop are dropped and the rest are re-expressed in crop
coordinates. A flip maps x to (W_crop − 1) − x, which keeps integer pixel centres
on integer pixel centres. One flip draw is consumed per call even when
``flip_prob`` is 0, so the generator stream does not depend on it.
"""

from typing import Tuple

import numpy as np

from ..core.errors import ConfigError, ShapeError
from ..core.interfaces import DotAnnotation
from ..core.model_config import INPUT_MULTIPLE


def hflip(image: np.ndarray,
          annotation: DotAnnotation) -> Tuple[np.ndarray, DotAnnotation]:
    """Mirror a C×H×W image and its dots left to right."""
    width = image.shape[-1]
    dots = annotation.dots.copy()
    dots[:, 0] = (width - 1) - dots[:, 0]
    return np.ascontiguousarray(image[..., ::-1]), DotAnnotation(dots)


def crop(image: np.ndarray, annotation: DotAnnotation, top: int, left: int,
         size: int) -> Tuple[np.ndarray, DotAnnotation]:
    """Square crop at (top, left); dots outside are dropped."""
    xs, ys = annotation.xs, annotation.ys
    keep = (xs >= left) & (xs < left + size) & (ys >= top) & (ys < top + size)
    dots = annotation.dots[keep] - np.array([left, top], dtype=np.float64)
    return image[:, top:top + size, left:left + size].copy(), DotAnnotation(dots)


def augment(image: np.ndarray, annotation: DotAnnotation, crop_size: int,
            flip_prob: float,
            rng: np.random.Generator) -> Tuple[np.ndarray, DotAnnotation]:
    """
    Random crop then random horizontal flip

    Args:
        image: 3×H×W float image
        annotation: Dots of ``image``
        crop_size: Square crop side, a multiple of 32 no larger than H or W
        flip_prob: Probability of a horizontal flip
        rng: Source of the crop corner and the flip draw

    Returns:
        (3×crop×crop image, dots in crop coordinates)
    """
    if image.ndim != 3:
        raise ShapeError("augment expects a C×H×W image", image.shape)
    _, h, w = image.shape
    if crop_size % INPUT_MULTIPLE:
        raise ConfigError(f"crop {crop_size} is not a multiple of {INPUT_MULTIPLE}")
    if crop_size > h or crop_size > w:
        raise ConfigError(f"crop {crop_size} exceeds the {w}×{h} image")
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))
    image, annotation = crop(image, annotation, top, left, crop_size)
    if rng.random() < flip_prob:
        image, annotation = hflip(image, annotation)
    return image, annotation
