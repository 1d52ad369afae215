"""
enums.py - Enums for every string-valued mode and toggle in rccformer

Config files, checkpoints and the command line refer to these by value, so the
values are part of the on-disk format.
"""

from enum import Enum


class FusionMode(Enum):
    """How the three unified pyramid levels are fused."""
    ADD = "add"
    CONCAT = "concat"
    CONCAT_ADD_ADD = "concat_add_add"
    CONCAT_ADD_CONCAT = "concat_add_concat"
    MFFM = "mffm"


class AttentionMode(Enum):
    """Attention variant inside each DEAB block."""
    GSA = "gsa"
    GSA_LOCAL = "gsa_local"
    DEA = "dea"


class ConvMode(Enum):
    """Convolution variant inside ASAM."""
    VANILLA = "vanilla"
    DEFORMABLE = "deformable"
    IDCONV = "idconv"


class NormKind(Enum):
    """Normalisation family."""
    LAYER = "layer"
    BATCH = "batch"


class DensityLevel(Enum):
    """Crowd density buckets, S0 (empty) to S4 (densest)."""
    S0 = "S0"
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"


class AblationMatrix(Enum):
    """Runnable ablation tables."""
    TABLE3 = "table3"
    TABLE4 = "table4"
    TABLE5 = "table5"
    TABLE6 = "table6"
    TABLE7 = "table7"
    ALPHA = "alpha"


class GradcheckScope(Enum):
    """Gradient certification suites."""
    OPS = "ops"
    BLOCKS = "blocks"
    MODEL = "model"


class Split(Enum):
    """Dataset partitions."""
    TRAIN = "train"
    VAL = "val"
