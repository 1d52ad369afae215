"""
rccformer.core.model_config - Run configuration for desk-scale and full-scale presets

This module provides the validated configuration tree for a run: architecture,
loss, optimiser, synthetic data generation and the training budget.

Key Features:
- Desk preset (default): 128 px scenes, batch 4, fusion width 64, 30 epochs
- Full preset: larger crops, batch 16, AdamW at lr 1e-5 / weight decay 1e-4
- pydantic models with ``extra="forbid"``; JSON form is what checkpoints embed
- Flat dotted-key YAML files (``model.deab_depth: 2``) overlaid on a preset
- ``RCC_PRESET`` / ``RCC_THREADS`` environment variables
"""

import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import (BaseModel, ConfigDict, Field, ValidationError, field_validator,
                      model_validator)

from ..enums import AttentionMode, ConvMode, FusionMode
from .errors import ConfigError

logger = logging.getLogger(__name__)

PATCH_STRIDES = (4, 2, 2, 2)
INPUT_MULTIPLE = 32
DENSITY_STRIDE = 8


class Preset(Enum):
    """Configuration presets"""
    DESK = "desk"
    FULL = "full"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class BackboneConfig(_Strict):
    """Four-stage pyramid encoder widths"""
    stage_channels: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    stage_depths: List[int] = Field(default_factory=lambda: [1, 1, 2, 1])
    stage_heads: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    sr_ratios: List[int] = Field(default_factory=lambda: [8, 4, 2, 1])
    mlp_ratio: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _check_stages(self) -> "BackboneConfig":
        for name in ("stage_channels", "stage_depths", "stage_heads", "sr_ratios"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} must list exactly 4 stages")
        for channels, heads in zip(self.stage_channels, self.stage_heads):
            if heads < 1 or channels % heads:
                raise ValueError(
                    f"stage width {channels} not divisible by {heads} heads"
                )
        if any(d < 1 for d in self.stage_depths) or any(r < 1 for r in self.sr_ratios):
            raise ValueError("stage depths and reduction ratios must be positive")
        return self


class ModelConfig(_Strict):
    """
    Architecture hyperparameters and ablation toggles

    The cumulative toggles reproduce the component ablation rows:
    baseline (all off), +MFFM, +MFFM+DEAB, full (all on).
    """
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    fusion_channels: int = Field(default=64, ge=2)
    use_mffm: bool = True
    fusion_mode: FusionMode = FusionMode.MFFM
    mffm_heads: int = Field(default=4, ge=1)
    use_deab: bool = True
    deab_depth: int = Field(default=2, ge=1)
    attention_heads: int = Field(default=4, ge=1)
    attention_mode: AttentionMode = AttentionMode.DEA
    local_kernel: int = Field(default=5, ge=1)
    alpha_init: float = 0.6
    cffn_ratio: int = Field(default=4, ge=1)
    use_asam: bool = True
    conv_mode: ConvMode = ConvMode.IDCONV
    head_epsilon: float = Field(default=0.0, ge=0.0)

    @field_validator("local_kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"local_kernel must be odd, got {value}")
        return value

    @model_validator(mode="after")
    def _check_toggles(self) -> "ModelConfig":
        if (self.use_deab or self.use_asam) and not self.use_mffm:
            raise ValueError(
                "DEAB and ASAM operate on fused features and require use_mffm"
            )
        c = self.fusion_channels
        fused = self.use_mffm and self.fusion_mode == FusionMode.MFFM
        if fused and c % self.mffm_heads:
            raise ValueError(
                f"fusion_channels {c} not divisible by mffm_heads {self.mffm_heads}"
            )
        if self.use_deab and c % self.attention_heads:
            raise ValueError(f"fusion_channels {c} not divisible by attention_heads "
                             f"{self.attention_heads}")
        if self.use_asam and c % 2:
            raise ValueError(f"ASAM halves channels; fusion_channels {c} must be even")
        return self

    @property
    def is_baseline(self) -> bool:
        return not self.use_mffm


class LossConfig(_Strict):
    """Composite counting objective weights and Sinkhorn settings"""
    lambda1: float = Field(default=0.1, gt=0.0)
    lambda2: float = Field(default=0.01, gt=0.0)
    sinkhorn_reg: float = Field(default=10.0, gt=0.0)
    sinkhorn_iters: int = Field(default=100, ge=1)
    norm_eps: float = Field(default=1e-8, gt=0.0)


class OptimizerConfig(_Strict):
    """AdamW settings"""
    lr: float = Field(default=1e-5, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)


class SynthConfig(_Strict):
    """Synthetic dataset generation options"""
    n_train: int = Field(default=200, ge=0)
    n_val: int = Field(default=40, ge=0)
    image_size: int = Field(default=128, ge=INPUT_MULTIPLE)
    count_min: int = Field(default=0, ge=0)
    count_max: int = Field(default=60, ge=0)
    head_radius: float = Field(default=4.0, gt=0.0)
    perspective: float = Field(default=2.5, ge=1.0)
    clutter: float = Field(default=0.5, ge=0.0)

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.image_size % INPUT_MULTIPLE:
            raise ValueError(f"image_size must be a multiple of {INPUT_MULTIPLE}")
        if self.count_min > self.count_max:
            raise ValueError("count_min exceeds count_max")
        return self


class RunConfig(_Strict):
    """Everything a run depends on; reproducible from (config, seed)"""
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=4, ge=1)
    crop: int = Field(default=128, ge=INPUT_MULTIPLE)
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    dataset: str = "data/synth"
    out: str = "runs/default"
    record_timing: bool = False

    @field_validator("crop")
    @classmethod
    def _crop_multiple(cls, value: int) -> int:
        if value % INPUT_MULTIPLE:
            raise ValueError(f"crop must be a multiple of {INPUT_MULTIPLE}")
        return value

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.out) / "model.rcck"

    @property
    def log_path(self) -> Path:
        return Path(self.out) / "train.jsonl"


def _desk_config() -> RunConfig:
    """Desk scale: from-scratch training needs a larger step than fine-tuning."""
    config = RunConfig()
    config.optimizer.lr = 1e-3
    return config


def _full_config() -> RunConfig:
    return RunConfig(
        model=ModelConfig(fusion_channels=128),
        synth=SynthConfig(image_size=512, count_max=600),
        epochs=1000,
        batch_size=16,
        crop=256,
    )


_PRESETS = {
    Preset.DESK: _desk_config,
    Preset.FULL: _full_config,
}


def get_run_config(preset: Optional[Preset] = None) -> RunConfig:
    """
    Get a fresh run configuration for a preset

    Args:
        preset: Preset to use (defaults to ``RCC_PRESET``, else desk)

    Returns:
        RunConfig instance
    """
    if preset is None:
        name = os.getenv("RCC_PRESET", Preset.DESK.value).lower()
        try:
            preset = Preset(name)
        except ValueError:
            raise ConfigError(f"unknown preset '{name}' in RCC_PRESET") from None
    return _PRESETS[preset]()


def flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested dict -> flat dotted keys."""
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def unflatten(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Flat dotted keys -> nested dict."""
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key '{key}' conflicts with a scalar parent")
        node[leaf] = value
    return tree


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Return a copy of ``config`` with flat dotted-key overrides applied

    Raises:
        ConfigError: unknown key or a value that fails validation
    """
    base = config.model_dump(mode="json")
    known = flatten(base)
    for key in overrides:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
    merged = dict(known)
    merged.update(overrides)
    try:
        return RunConfig.model_validate(unflatten(merged))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_run_config(path: Optional[Union[str, Path]] = None,
                    preset: Optional[Preset] = None) -> RunConfig:
    """
    Load a flat-key YAML config file over a preset

    Args:
        path: YAML file; ``None`` returns the preset unchanged
        preset: Base preset (defaults to ``RCC_PRESET``)

    Returns:
        Validated RunConfig
    """
    config = get_run_config(preset)
    if path is None:
        return config
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as file:
            data = yaml.safe_load(file) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML parsing error in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of flat keys")
    logger.info(f"Loaded config {path} ({len(data)} keys)")
    return apply_overrides(config, data)


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> None:
    """Write ``config`` as flat-key YAML."""
    with open(path, "w", encoding="utf-8") as file:
        yaml.safe_dump(flatten(config.model_dump(mode="json")), file, sort_keys=True)


def eval_threads() -> int:
    """Evaluation worker cap from ``RCC_THREADS`` (default 1)."""
    raw = os.getenv("RCC_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"RCC_THREADS must be an integer, got '{raw}'") from None
    return max(1, threads)
