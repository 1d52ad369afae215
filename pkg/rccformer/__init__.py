"""
rccformer - Crowd counting by density estimation on a from-scratch NumPy autodiff engine

This package contains:
- core: tensor engine, primitives, configuration, checkpoints and shared interfaces
- nets: pyramid backbone, multi-level fusion, detail-embedded attention, IDConv/ASAM
- data: synthetic scenes, dataset directories and augmentation
- losses / metrics: composite counting objective and MAE/MSE/NAE
- orchestrator / evaluator: training, ablation and evaluation pipelines
- cli: command-line verbs
"""

__version__ = "0.1.0"
