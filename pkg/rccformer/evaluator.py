"""
rccformer.evaluator - Gradient-free evaluation of a density network

Key Features:
- Batches fan out across worker threads (``RCC_THREADS``) with results
  collected in submission order, so reports do not depend on the thread count
- Overall MAE/MSE/NAE plus a per-density-level breakdown
- Checkpoints are checked against the dataset before any forward pass
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .core.checkpoint import load_checkpoint
from .core.errors import ConfigMismatchError, DatasetError
from .core.interfaces import EvalRecord
from .core.model_config import INPUT_MULTIPLE, eval_threads
from .core.tensor import Tensor
from .data.loader import Batch, CrowdDataset
from .enums import Split
from .metrics import BucketReport, bucket_report, mae, mse, nae_or_none
from .nets.model import RCCFormer, forward

logger = logging.getLogger(__name__)

EVAL_BATCH = 4


@dataclass
class EvalSummary:
    """Metrics of one evaluation pass"""
    mae: float
    mse: float
    nae: Optional[float]
    records: List[EvalRecord] = field(default_factory=list)

    def report(self) -> BucketReport:
        return bucket_report(self.records)

    def as_dict(self) -> Dict[str, Optional[float]]:
        return {"mae": self.mae, "mse": self.mse, "nae": self.nae}


def check_compatible(model: RCCFormer, images: np.ndarray) -> None:
    """Images must be B×3×H×W with H and W multiples of 32."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ConfigMismatchError(
            f"model expects B×3×H×W images, got {images.shape}"
        )
    h, w = images.shape[2:]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ConfigMismatchError(
            f"image size {w}×{h} is not a multiple of {INPUT_MULTIPLE}"
        )


def predict_counts(model: RCCFormer, images: np.ndarray) -> np.ndarray:
    """Per-image predicted counts; no tape is active on worker threads."""
    check_compatible(model, images)
    return forward(Tensor(images), model).counts


class Evaluator:
    """
    Runs a model over a dataset split

    Args:
        model: Network to evaluate (switched to eval mode)
        threads: Worker cap; defaults to ``RCC_THREADS``
        batch_size: Images per forward pass
    """

    def __init__(self, model: RCCFormer, threads: Optional[int] = None,
                 batch_size: int = EVAL_BATCH):
        self.model = model
        self.threads = threads or eval_threads()
        self.batch_size = batch_size

    def _run(self, batch: Batch) -> List[EvalRecord]:
        counts = predict_counts(self.model, batch.images)
        return [EvalRecord(image_id, float(pred), int(round(gt)))
                for image_id, pred, gt in zip(batch.ids, counts, batch.counts)]

    def evaluate(self, dataset: CrowdDataset) -> EvalSummary:
        """
        Evaluate every image of ``dataset``

        Returns:
            EvalSummary; ``nae`` is None when every ground truth is zero
        """
        if not len(dataset):
            raise DatasetError(
                f"{dataset.root} has no {dataset.split.value} images to evaluate"
            )
        self.model.eval()
        batches = list(dataset.eval_batches(self.batch_size))
        check_compatible(self.model, batches[0].images)
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            chunks = list(pool.map(self._run, batches))
        records = [record for chunk in chunks for record in chunk]
        levels = {row["id"]: row.get("density_level") for row in dataset.rows}
        for record in records:
            record.level = levels.get(record.image_id)
        summary = EvalSummary(mae(records), mse(records), nae_or_none(records), records)
        logger.info(f"Evaluated {len(records)} images: "
                    f"MAE {summary.mae:.3f} MSE {summary.mse:.3f}")
        return summary


def load_model(checkpoint: Union[str, Path]) -> RCCFormer:
    """Rebuild a network from a checkpoint file."""
    config, state = load_checkpoint(checkpoint)
    model = RCCFormer.from_seed(config, 0)
    model.load_state_dict(state)
    return model.eval()


def evaluate_checkpoint(checkpoint: Union[str, Path], root: Union[str, Path],
                        split: Split = Split.VAL,
                        threads: Optional[int] = None) -> EvalSummary:
    """Load ``checkpoint`` and evaluate it on ``split`` of the dataset at ``root``."""
    model = load_model(checkpoint)
    return Evaluator(model, threads).evaluate(CrowdDataset(root, split))
