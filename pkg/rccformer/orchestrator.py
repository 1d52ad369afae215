"""
rccformer.orchestrator - Training and ablation pipelines

This module drives the complete flow: synthesise → calibrate → train → evaluate
→ checkpoint, and runs whole ablation matrices with a shared seed and budget.

Key Features:
- One seed fixes initialisation, shuffling, crops and flips
- JSON-lines log: a run header, then one row per epoch
- Checkpoint of the initialisation, replaced on every validation-MAE improvement
- A non-finite loss aborts the run and leaves the last good checkpoint in place
- Ablation matrices reported as pandas tables and JSON
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .core.checkpoint import save_checkpoint
from .core.errors import ConfigError, TrainingDivergedError
from .core.model_config import ModelConfig, RunConfig
from .core.optim import AdamW
from .core.rng import child_rng
from .core.tensor import Tape, Tensor
from .data.loader import CrowdDataset
from .enums import AblationMatrix, AttentionMode, ConvMode, FusionMode, Split
from .evaluator import EvalSummary, Evaluator
from .losses import composite_loss
from .metrics import format_table
from .nets.model import RCCFormer, forward

logger = logging.getLogger(__name__)

# child-stream keys of the run seed
DATA_STREAM = 1
CALIBRATION_STREAM = 2

LOCAL_KERNELS = (3, 5, 7)
ALPHA_VALUES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class EpochRow:
    """One body line of the training log"""
    epoch: int
    train_loss: float
    val_mae: float
    val_mse: float
    val_nae: Optional[float]
    seconds: Optional[float] = None


@dataclass
class TrainResult:
    """Where a run left its artifacts and how well it did"""
    checkpoint: Path
    log: Path
    initial: EvalSummary
    best_mae: float
    rows: List[EpochRow] = field(default_factory=list)


def _json_line(payload: Dict) -> str:
    return json.dumps(payload) + "\n"


class Trainer:
    """
    Trains one configuration on one dataset

    Args:
        config: Complete run configuration
        model: Pre-built network (defaults to one initialised from ``config.seed``)
    """

    def __init__(self, config: RunConfig, model: Optional[RCCFormer] = None):
        self.config = config
        print("🔄 Initializing trainer...")
        self.model = model or RCCFormer.from_seed(config.model, config.seed)
        self.optimizer = AdamW.from_config(self.model.parameters(), config.optimizer)
        self.train_set = CrowdDataset(config.dataset, Split.TRAIN)
        self.val_set = CrowdDataset(config.dataset, Split.VAL)
        if not len(self.val_set):
            raise ConfigError(f"validation split of {config.dataset} is empty; "
                              "checkpoints are selected by validation MAE")
        self.evaluator = Evaluator(self.model)
        self.data_rng = child_rng(config.seed, DATA_STREAM)
        print(f"✅ Model ready ({self.model.num_parameters()} parameters, "
              f"{len(self.train_set)} train / {len(self.val_set)} val scenes)")

    def calibrate(self) -> None:
        """
        One gradient-free training-mode pass to initialise normalisation statistics

        Uses its own generator stream so the training draws are unaffected.
        """
        rng = child_rng(self.config.seed, CALIBRATION_STREAM)
        config = self.config
        batches = self.train_set.batches(config.batch_size, rng, config.crop,
                                         config.flip_prob)
        batch = next(batches, None)
        if batch is None:
            raise ConfigError(f"training split of {self.config.dataset} is empty")
        self.model.train()
        forward(Tensor(batch.images), self.model)

    def train_epoch(self, epoch: int) -> float:
        """Mean composite loss over the epoch's mini-batches."""
        self.model.train()
        losses = []
        for batch in self.train_set.batches(self.config.batch_size, self.data_rng,
                                            self.config.crop, self.config.flip_prob):
            self.optimizer.zero_grad()
            with Tape() as tape:
                density = forward(Tensor(batch.images), self.model)
                loss = composite_loss(density.grid, batch.targets, self.config.loss)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} in epoch {epoch} "
                                            f"(batch {', '.join(batch.ids)})")
            tape.backward(loss)
            self.optimizer.step()
            losses.append(value)
        return float(np.mean(losses)) if losses else 0.0

    def _checkpoint(self) -> None:
        save_checkpoint(self.config.checkpoint_path, self.config.model,
                        self.model.state_dict())

    def run(self) -> TrainResult:
        """
        Full training run

        Returns:
            TrainResult with the best validation MAE seen (initialisation included)
        """
        out = Path(self.config.out)
        out.mkdir(parents=True, exist_ok=True)
        self.calibrate()
        initial = self.evaluator.evaluate(self.val_set)
        best = initial.mae
        self._checkpoint()
        print(f"✅ Initial validation MAE {initial.mae:.3f}")

        rows: List[EpochRow] = []
        with open(self.config.log_path, "w", encoding="utf-8") as log:
            log.write(_json_line({"run": self.config.model_dump(mode="json"),
                                  "initial": initial.as_dict()}))
            for epoch in range(1, self.config.epochs + 1):
                started = time.perf_counter()
                try:
                    train_loss = self.train_epoch(epoch)
                except TrainingDivergedError:
                    logger.error(f"Run diverged in epoch {epoch}; "
                                 f"keeping {self.config.checkpoint_path}")
                    raise
                summary = self.evaluator.evaluate(self.val_set)
                seconds = None
                if self.config.record_timing:
                    seconds = time.perf_counter() - started
                row = EpochRow(epoch, train_loss, summary.mae, summary.mse, summary.nae,
                               seconds)
                rows.append(row)
                log.write(_json_line(vars(row)))
                log.flush()
                improved = summary.mae < best
                if improved:
                    best = summary.mae
                    self._checkpoint()
                print(f"🔄 Epoch {epoch}/{self.config.epochs}: loss {train_loss:.4f} "
                      f"val MAE {summary.mae:.3f}{' (best)' if improved else ''}")

        logger.info(f"Training finished: best validation MAE {best:.3f}")
        return TrainResult(self.config.checkpoint_path, self.config.log_path, initial,
                           best, rows)


def train(config: RunConfig) -> TrainResult:
    return Trainer(config).run()


# =============================================================================
# Ablation matrices
# =============================================================================


def ablation_rows(matrix: AblationMatrix,
                  base: ModelConfig) -> List[Tuple[str, ModelConfig]]:
    """
    Labelled model configurations of one ablation matrix

    Args:
        matrix: Which ablation
        base: Configuration every row starts from

    Returns:
        (label, config) pairs in table order
    """
    try:
        matrix = AblationMatrix(matrix)
    except ValueError:
        raise ConfigError(f"unknown ablation matrix '{matrix}'") from None
    variants: List[Tuple[str, Dict]]
    if matrix == AblationMatrix.TABLE3:
        variants = [
            ("baseline", {"use_mffm": False, "use_deab": False, "use_asam": False}),
            ("+MFFM", {"use_mffm": True, "use_deab": False, "use_asam": False}),
            ("+DEAB", {"use_mffm": True, "use_deab": True, "use_asam": False}),
            ("+ASAM", {"use_mffm": True, "use_deab": True, "use_asam": True}),
        ]
    elif matrix == AblationMatrix.TABLE4:
        variants = [(mode.value, {"fusion_mode": mode}) for mode in FusionMode]
    elif matrix == AblationMatrix.TABLE5:
        variants = [(f"{k}x{k}", {"local_kernel": k}) for k in LOCAL_KERNELS]
    elif matrix == AblationMatrix.TABLE6:
        variants = [(mode.value, {"attention_mode": mode}) for mode in AttentionMode]
    elif matrix == AblationMatrix.TABLE7:
        variants = [(mode.value, {"conv_mode": mode}) for mode in ConvMode]
    else:
        variants = [(f"alpha={a}", {"alpha_init": a}) for a in ALPHA_VALUES]
    base_dump = base.model_dump()
    return [(label, ModelConfig.model_validate({**base_dump, **update}))
            for label, update in variants]


def run_ablation(config: RunConfig, matrix: AblationMatrix) -> pd.DataFrame:
    """
    Train every row of ``matrix`` under the same seed and budget

    Each row writes its run to ``<out>/<matrix>/<label>``; the table is written to
    ``<out>/<matrix>.txt`` and ``<out>/<matrix>.json``.

    Returns:
        DataFrame indexed by row label with columns mae and mse
    """
    rows = ablation_rows(matrix, config.model)
    matrix = AblationMatrix(matrix)
    out = Path(config.out)
    results = []
    for label, model_config in rows:
        print(f"🔄 {matrix.value}: training '{label}'")
        safe = label.replace("+", "plus_").replace("=", "_")
        run = config.model_copy(update={"model": model_config,
                                        "out": str(out / matrix.value / safe)})
        result = Trainer(run).run()
        final = result.rows[-1] if result.rows else None
        results.append({
            "row": label,
            "mae": final.val_mae if final else result.initial.mae,
            "mse": final.val_mse if final else result.initial.mse,
        })
    table = pd.DataFrame(results).set_index("row")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{matrix.value}.txt").write_text(format_table(table) + "\n",
                                             encoding="utf-8")
    (out / f"{matrix.value}.json").write_text(json.dumps(results, indent=2) + "\n",
                                              encoding="utf-8")
    print(f"✅ {matrix.value} written to {out}")
    return table
