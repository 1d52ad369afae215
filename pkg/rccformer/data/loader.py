"""
rccformer.data.loader - Dataset directories on disk

Layout of a dataset root::

    images/<id>.png          8-bit RGB
    annotations/<id>.txt     one "x y" dot per line, UTF-8, empty file = no people
    manifest.jsonl           {"id", "count", "density_level", "split", "seed"} per line
    dataset.yaml             generation settings, level bounds and split seed ranges

Key Features:
- Lazy per-sample loading with a bounded least-recently-used cache
- Mini-batches with random crop/flip and binned stride-8 ground truth
- Train and validation scenes come from disjoint seed ranges
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from ..core.errors import AnnotationError, ConfigError, DatasetError
from ..core.interfaces import DotAnnotation
from ..core.model_config import SynthConfig
from ..core.rng import MAX_SEED
from ..enums import DensityLevel, Split
from ..losses import bin_dots
from ..metrics import DESK_BOUNDS
from .augment import augment
from .synth import Scene, SceneSpec, synth_scene

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
DATASET_INFO = "dataset.yaml"
IMAGES = "images"
ANNOTATIONS = "annotations"
PNG_COMPRESS_LEVEL = 6
# samples; a whole desk-scale split fits
CACHE_SIZE = 256


# =============================================================================
# Samples and files
# =============================================================================


@dataclass
class Sample:
    """One loaded scene: 3×H×W float64 image in [0, 1] plus its dots"""
    image: np.ndarray
    annotation: DotAnnotation
    image_id: str
    level: Optional[DensityLevel] = None

    @property
    def count(self) -> int:
        return len(self.annotation)


@dataclass
class Batch:
    """Augmented mini-batch with stride-8 ground truth"""
    images: np.ndarray       # B×3×H×W
    targets: np.ndarray      # B×(H/8)×(W/8)
    ids: List[str]

    @property
    def counts(self) -> np.ndarray:
        return self.targets.sum(axis=(1, 2))


def read_image(path: Union[str, Path]) -> np.ndarray:
    """PNG/JPEG → 3×H×W float64 in [0, 1]."""
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"cannot read image {path}: {e}") from e
    return np.ascontiguousarray(pixels.transpose(2, 0, 1) / 255.0)


def write_image(path: Union[str, Path], image: np.ndarray) -> None:
    """Write an H×W×3 uint8 array as PNG with pinned encoder settings."""
    Image.fromarray(image, mode="RGB").save(path, format="PNG",
                                            compress_level=PNG_COMPRESS_LEVEL)


def parse_annotation(text: str,
                     image_hw: Optional[Tuple[int, int]] = None) -> DotAnnotation:
    """
    Parse "x y" lines

    Args:
        text: File contents; blank lines are ignored
        image_hw: When given, every dot must satisfy 0 ≤ x < W and 0 ≤ y < H

    Raises:
        AnnotationError: Malformed line (1-based line number) or out-of-bounds dot
    """
    dots = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        try:
            if len(fields) != 2:
                raise ValueError
            x, y = float(fields[0]), float(fields[1])
        except ValueError:
            raise AnnotationError(
                f"line {number}: expected 'x y', got {line!r}"
            ) from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise AnnotationError(f"line {number}: non-finite coordinate {line!r}")
        dots.append((x, y))
    annotation = DotAnnotation(np.array(dots, dtype=np.float64).reshape(-1, 2))
    if image_hw is not None:
        check_bounds(annotation, image_hw)
    return annotation


def check_bounds(annotation: DotAnnotation, image_hw: Tuple[int, int]) -> None:
    h, w = image_hw
    xs, ys = annotation.xs, annotation.ys
    outside = np.flatnonzero(~((xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)))
    if outside.size:
        index = int(outside[0])
        raise AnnotationError(
            f"dot {index} at ({xs[index]}, {ys[index]}) lies outside {w}×{h}"
        )


def format_annotation(annotation: DotAnnotation) -> str:
    """Shortest round-tripping decimal for each coordinate."""
    return "".join(f"{float(x)!r} {float(y)!r}\n" for x, y in annotation.dots)


def load_sample(image_path: Union[str, Path],
                annotation_path: Union[str, Path]) -> Tuple[np.ndarray, DotAnnotation]:
    """
    Load an image and its dots

    Returns:
        (3×H×W float64 image in [0, 1], validated DotAnnotation)
    """
    image = read_image(image_path)
    try:
        text = Path(annotation_path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError(f"annotation file not found: {annotation_path}") from None
    return image, parse_annotation(text, image.shape[1:])


# =============================================================================
# Splits and dataset building
# =============================================================================


def split_seed_ranges(base_seed: int, n_train: int,
                      n_val: int) -> Dict[Split, Tuple[int, int]]:
    """Half-open scene-seed intervals, train first, never overlapping."""
    end = base_seed + n_train + n_val
    if base_seed < 0 or end - 1 > MAX_SEED:
        raise ConfigError(
            f"seed range [{base_seed}, {end}) leaves the unsigned 64-bit range"
        )
    return {
        Split.TRAIN: (base_seed, base_seed + n_train),
        Split.VAL: (base_seed + n_train, end),
    }


def _prepare_root(root: Path, force: bool) -> None:
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetError(f"{root} is not empty; pass --force to overwrite")
        for name in (MANIFEST, DATASET_INFO):
            (root / name).unlink(missing_ok=True)
        for sub in (IMAGES, ANNOTATIONS):
            for stale in (root / sub).glob("*"):
                stale.unlink()
    (root / IMAGES).mkdir(parents=True, exist_ok=True)
    (root / ANNOTATIONS).mkdir(parents=True, exist_ok=True)


def save_scene(root: Union[str, Path], image_id: str, scene: Scene) -> None:
    root = Path(root)
    write_image(root / IMAGES / f"{image_id}.png", scene.image)
    text = format_annotation(scene.annotation)
    (root / ANNOTATIONS / f"{image_id}.txt").write_text(text, encoding="utf-8")


def build_dataset(root: Union[str, Path], config: SynthConfig, seed: int,
                  force: bool = False) -> Path:
    """
    Synthesise train and validation scenes into ``root``

    Args:
        root: Output directory (created if missing)
        config: Scene generation settings and split sizes
        seed: Base of the scene-seed ranges
        force: Overwrite an existing non-empty directory

    Returns:
        Path of the written manifest
    """
    root = Path(root)
    _prepare_root(root, force)
    ranges = split_seed_ranges(seed, config.n_train, config.n_val)
    rows = []
    for split, (start, stop) in ranges.items():
        for index, scene_seed in enumerate(range(start, stop)):
            image_id = f"{split.value}_{index:05d}"
            scene = synth_scene(SceneSpec.from_config(config, scene_seed))
            save_scene(root, image_id, scene)
            rows.append({"id": image_id, "count": scene.count,
                         "density_level": scene.level.value, "split": split.value,
                         "seed": scene_seed})
    with open(root / MANIFEST, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row) + "\n")
    info = {
        "seed": seed,
        "level_bounds": list(DESK_BOUNDS),
        "splits": {split.value: list(span) for split, span in ranges.items()},
        "synth": config.model_dump(mode="json"),
    }
    with open(root / DATASET_INFO, "w", encoding="utf-8") as handle:
        yaml.safe_dump(info, handle, sort_keys=True)
    logger.info(f"Wrote {len(rows)} scenes to {root}")
    return root / MANIFEST


def read_manifest(root: Union[str, Path]) -> List[Dict]:
    path = Path(root) / MANIFEST
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DatasetError(f"no {MANIFEST} under {root}") from None
    try:
        return [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: {e}") from e


# =============================================================================
# Dataset
# =============================================================================


class CrowdDataset:
    """
    One split of a dataset directory

    Samples are loaded on first access and kept in a least-recently-used cache
    of at most ``cache_size`` samples (0 disables caching).
    """

    def __init__(self, root: Union[str, Path], split: Union[Split, str] = Split.TRAIN,
                 cache_size: int = CACHE_SIZE):
        if cache_size < 0:
            raise ConfigError(f"cache_size must be non-negative, got {cache_size}")
        self.root = Path(root)
        self.split = Split(split)
        self.cache_size = cache_size
        self.cache: "OrderedDict[int, Sample]" = OrderedDict()
        self.rows = [row for row in read_manifest(self.root)
                     if row.get("split") == self.split.value]
        logger.info(f"Dataset {self.root} [{self.split.value}]: "
                    f"{len(self.rows)} samples")

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, index: int) -> Sample:
        if index in self.cache:
            self.cache.move_to_end(index)
            return self.cache[index]
        row = self.rows[index]
        image, annotation = load_sample(self.root / IMAGES / f"{row['id']}.png",
                                        self.root / ANNOTATIONS / f"{row['id']}.txt")
        if len(annotation) != row["count"]:
            raise DatasetError(f"{row['id']}: manifest count {row['count']} but "
                               f"{len(annotation)} dots on disk")
        level = DensityLevel(row["density_level"]) if row.get("density_level") else None
        sample = Sample(image, annotation, row["id"], level)
        if self.cache_size:
            self.cache[index] = sample
            if len(self.cache) > self.cache_size:
                self.cache.popitem(last=False)
        return sample

    def __iter__(self) -> Iterator[Sample]:
        for index in range(len(self)):
            yield self[index]

    @property
    def ids(self) -> List[str]:
        return [row["id"] for row in self.rows]

    def info(self) -> Dict:
        """Contents of dataset.yaml (empty when absent)."""
        path = self.root / DATASET_INFO
        if not path.exists():
            return {}
        with open(path, "r", encoding="utf-8") as handle:
            return yaml.safe_load(handle) or {}

    def batches(self, batch_size: int, rng: np.random.Generator, crop: int,
                flip_prob: float = 0.5) -> Iterator[Batch]:
        """
        Shuffled, augmented mini-batches; the last one may be short

        Args:
            batch_size: Images per batch
            rng: Shuffle, crop and flip source
            crop: Square crop side
            flip_prob: Horizontal flip probability
        """
        order = rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            images, targets, ids = [], [], []
            for index in order[start:start + batch_size]:
                sample = self[int(index)]
                image, annotation = augment(sample.image, sample.annotation, crop,
                                            flip_prob, rng)
                images.append(image)
                targets.append(bin_dots(annotation, image.shape[1:]))
                ids.append(sample.image_id)
            yield Batch(np.stack(images), np.stack(targets), ids)

    def eval_batches(self, batch_size: int) -> Iterator[Batch]:
        """Full images in manifest order, no augmentation."""
        for start in range(0, len(self), batch_size):
            stop = min(start + batch_size, len(self))
            samples = [self[i] for i in range(start, stop)]
            grids = [bin_dots(s.annotation, s.image.shape[1:]) for s in samples]
            yield Batch(np.stack([s.image for s in samples]),
                        np.stack(grids),
                        [s.image_id for s in samples])
