"""
rccformer.render - Density grid files and heatmaps

Grid file layout (little-endian):

    magic    4 bytes   b"RCCD"
    H        uint32    grid rows
    W        uint32    grid columns
    payload  float64 × H·W, row-major

Heatmaps use the "jet" colormap on the grid divided by its maximum (an all-zero
grid renders as the bottom colour), each cell drawn as a RENDER_SCALE square.
"""

import logging
import struct
from pathlib import Path
from typing import Union

import matplotlib
import numpy as np
from PIL import Image

from .core.errors import DatasetError, ShapeError

logger = logging.getLogger(__name__)

GRID_MAGIC = b"RCCD"
RENDER_SCALE = 8
COLORMAP = "jet"
_HEADER = struct.Struct("<4sII")


def write_grid(path: Union[str, Path], grid: np.ndarray) -> Path:
    """Write an H×W density grid."""
    grid = np.asarray(grid, dtype="<f8")
    if grid.ndim != 2:
        raise ShapeError("density grid must be 2-D", grid.shape)
    path = Path(path)
    path.write_bytes(_HEADER.pack(GRID_MAGIC, *grid.shape) + grid.tobytes(order="C"))
    return path


def read_grid(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated grid header")
    magic, h, w = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * h * w:
        raise DatasetError(
            f"{path}: expected {8 * h * w} payload bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f8").reshape(h, w).astype(np.float64)


def heatmap(grid: np.ndarray, scale: int = RENDER_SCALE) -> np.ndarray:
    """H×W grid → (H·scale)×(W·scale)×3 uint8 RGB."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max() if grid.size else 0.0
    normalized = grid / peak if peak > 0 else np.zeros_like(grid)
    rgba = matplotlib.colormaps[COLORMAP](normalized)
    rgb = np.round(rgba[..., :3] * 255).astype(np.uint8)
    return np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)


def write_heatmap(path: Union[str, Path], grid: np.ndarray,
                  scale: int = RENDER_SCALE) -> Path:
    path = Path(path)
    image = Image.fromarray(heatmap(grid, scale), mode="RGB")
    image.save(path, format="PNG", compress_level=6)
    logger.info(f"Wrote heatmap {path}")
    return path
