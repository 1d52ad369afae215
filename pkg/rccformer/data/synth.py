"""
rccformer.data.synth - Synthetic dot-annotated crowd scenes

Key Features:
- Dark Gaussian "heads" centred on integer pixels, one dot per head
- Perspective: head radius shrinks from ``head_radius`` at the top row to
  ``head_radius / perspective`` at the bottom row
- Elongated distractor blobs as background clutter, never annotated
- Low-frequency textured background
- Deterministic per seed; infeasible packings are rejected up front
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core.errors import SceneError
from ..core.interfaces import DotAnnotation
from ..core.model_config import INPUT_MULTIPLE, SynthConfig
from ..core.rng import make_rng
from ..enums import DensityLevel
from ..metrics import DESK_BOUNDS, density_level

logger = logging.getLogger(__name__)

MAX_FILL = 0.5            # disk area over image area above which packing is refused
ATTEMPTS_PER_HEAD = 400
CLUTTER_AREA = 1024       # pixels per distractor at clutter 1.0
TEXTURE_BLOCK = 8


class SceneSpec(BaseModel):
    """One scene request"""
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(default=128, ge=INPUT_MULTIPLE)
    count_min: int = Field(default=0, ge=0)
    count_max: int = Field(default=60, ge=0)
    count: Optional[int] = Field(default=None, ge=0)
    head_radius: float = Field(default=4.0, gt=0.0)
    perspective: float = Field(default=2.5, ge=1.0)
    clutter: float = Field(default=0.5, ge=0.0)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)

    @model_validator(mode="after")
    def _check(self) -> "SceneSpec":
        if self.image_size % INPUT_MULTIPLE:
            raise ValueError(f"image_size must be a multiple of {INPUT_MULTIPLE}")
        if self.count_min > self.count_max:
            raise ValueError("count_min exceeds count_max")
        return self

    @classmethod
    def from_config(cls, config: SynthConfig, seed: int,
                    count: Optional[int] = None) -> "SceneSpec":
        return cls(image_size=config.image_size, count_min=config.count_min,
                   count_max=config.count_max, count=count,
                   head_radius=config.head_radius, perspective=config.perspective,
                   clutter=config.clutter, seed=seed)

    def radius_at(self, y: np.ndarray) -> np.ndarray:
        depth = np.asarray(y, dtype=np.float64) / max(self.image_size - 1, 1)
        return self.head_radius / (1.0 + (self.perspective - 1.0) * depth)


@dataclass
class Scene:
    """Rendered scene: uint8 H×W×3 image, head dots and density level"""
    image: np.ndarray
    annotation: DotAnnotation
    level: DensityLevel
    seed: int

    @property
    def count(self) -> int:
        return len(self.annotation)


def _check_feasible(spec: SceneSpec, count: int) -> None:
    mean_radius = float(np.mean(spec.radius_at(np.arange(spec.image_size))))
    fill = count * np.pi * mean_radius ** 2 / spec.image_size ** 2
    if fill > MAX_FILL:
        raise SceneError(f"{count} heads of mean radius {mean_radius:.2f} cannot be "
                         f"packed into {spec.image_size}×{spec.image_size} "
                         f"(fill {fill:.2f} > {MAX_FILL})")


def _place_heads(spec: SceneSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample non-overlapping integer centres, (count, 2) as (x, y)."""
    size = spec.image_size
    centres = np.zeros((0, 2))
    radii = np.zeros(0)
    attempts = 0
    while len(centres) < count:
        attempts += 1
        if attempts > ATTEMPTS_PER_HEAD * max(count, 1):
            raise SceneError(f"placed only {len(centres)} of {count} heads "
                             f"in {size}×{size}")
        x, y = rng.integers(0, size, size=2)
        r = float(spec.radius_at(y))
        if len(centres):
            gap = np.hypot(centres[:, 0] - x, centres[:, 1] - y)
            if np.any(gap < radii + r):
                continue
        centres = np.vstack([centres, [x, y]])
        radii = np.append(radii, r)
    return centres


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.45, 0.75, size=3)
    blocks = size // TEXTURE_BLOCK
    coarse = rng.normal(0.0, 0.06, size=(blocks, blocks, 1))
    texture = np.kron(coarse, np.ones((TEXTURE_BLOCK, TEXTURE_BLOCK, 1)))
    shade = np.linspace(-0.05, 0.05, size).reshape(size, 1, 1)
    fine = rng.normal(0.0, 0.015, size=(size, size, 1))
    return base.reshape(1, 1, 3) + texture + shade + fine


def _stamp(canvas: np.ndarray, cx: float, cy: float, sy: float, sx: float,
           colour: np.ndarray, opacity: float = 0.9) -> None:
    """Blend an axis-aligned Gaussian blob into ``canvas`` in place."""
    size = canvas.shape[0]
    reach = int(np.ceil(3 * max(sx, sy)))
    y0, y1 = max(0, int(cy) - reach), min(size, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(size, int(cx) + reach + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    g = opacity * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    patch = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = patch * (1 - g[..., None]) + colour * g[..., None]


def synth_scene(spec: SceneSpec) -> Scene:
    """
    Render one synthetic crowd scene

    Args:
        spec: Size, count range (or exact count), perspective, clutter and seed

    Returns:
        Scene whose dot count equals the number of rendered heads

    Raises:
        SceneError: The requested heads cannot be packed
    """
    rng = make_rng(spec.seed)
    count = spec.count
    if count is None:
        count = int(rng.integers(spec.count_min, spec.count_max + 1))
    _check_feasible(spec, count)
    size = spec.image_size
    canvas = _background(size, rng)

    n_clutter = int(round(spec.clutter * size * size / CLUTTER_AREA))
    for _ in range(n_clutter):
        cx, cy = rng.uniform(0, size, size=2)
        r = float(spec.radius_at(cy))
        sx, sy = r * rng.uniform(1.5, 3.0), r * rng.uniform(0.3, 0.6)
        if rng.random() < 0.5:
            sx, sy = sy, sx
        _stamp(canvas, cx, cy, sy, sx, rng.uniform(0.2, 0.9, size=3), opacity=0.6)

    centres = _place_heads(spec, count, rng)
    for x, y in centres:
        sigma = 0.5 * float(spec.radius_at(y))
        _stamp(canvas, x, y, sigma, sigma, rng.uniform(0.02, 0.15, size=3))

    image = np.round(np.clip(canvas, 0.0, 1.0) * 255).astype(np.uint8)
    annotation = DotAnnotation(centres)
    level = density_level(count, DESK_BOUNDS)
    logger.debug(f"Scene seed={spec.seed}: {count} heads, {n_clutter} distractors, "
                 f"{level.value}")
    return Scene(image, annotation, level, spec.seed)
