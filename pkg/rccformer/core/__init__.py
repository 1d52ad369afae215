"""
rccformer.core - Foundations shared by every block

- tensor: define-by-run tensors and the gradient tape
- nnops: convolution, normalisation, sampling and attention primitives
- gradcheck: finite-difference certification
- model_config: pydantic run configuration and presets
- checkpoint: binary checkpoint container
- optim: AdamW
"""

from .errors import RCCError
from .interfaces import DensityMap, DotAnnotation, EvalRecord, FeaturePyramid, Module
from .model_config import ModelConfig, RunConfig, get_run_config, load_run_config
from .tensor import Parameter, Tape, Tensor

__version__ = "0.1.0"
__all__ = [
    "RCCError",
    "DensityMap",
    "DotAnnotation",
    "EvalRecord",
    "FeaturePyramid",
    "Module",
    "ModelConfig",
    "RunConfig",
    "get_run_config",
    "load_run_config",
    "Parameter",
    "Tape",
    "Tensor",
]
