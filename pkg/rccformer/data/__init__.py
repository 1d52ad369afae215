"""
rccformer.data - Synthetic scenes, dataset directories and augmentation
"""

from .augment import augment, hflip
from .loader import (Batch, CrowdDataset, Sample, build_dataset, load_sample,
                     split_seed_ranges)
from .synth import Scene, SceneSpec, synth_scene

__all__ = [
    "augment",
    "hflip",
    "Batch",
    "CrowdDataset",
    "Sample",
    "build_dataset",
    "load_sample",
    "split_seed_ranges",
    "Scene",
    "SceneSpec",
    "synth_scene",
]
