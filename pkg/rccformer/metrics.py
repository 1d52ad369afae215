"""
rccformer.metrics - Counting metrics and result tables

Key Features:
- MAE, MSE (root of the mean squared error) and NAE over ``EvalRecord`` lists
- NAE skips images whose ground truth is zero
- Density-level bucketing with NWPU bounds or desk-scale bounds
- Plain-text tables through pandas and JSON-lines rows ``{id, pred, gt}``

Predicted counts are never rounded.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .core.errors import DomainError
from .core.interfaces import EvalRecord
from .enums import DensityLevel

logger = logging.getLogger(__name__)

# Inclusive upper limits of S0..S3; anything above the last limit is S4
NWPU_BOUNDS: Tuple[int, int, int, int] = (0, 100, 500, 5000)
DESK_BOUNDS: Tuple[int, int, int, int] = (0, 10, 25, 50)


def _arrays(records: Sequence[EvalRecord], what: str) -> Tuple[np.ndarray, np.ndarray]:
    if not records:
        raise DomainError(f"{what} of an empty record set is undefined")
    pred = np.array([r.pred for r in records], dtype=np.float64)
    gt = np.array([r.gt for r in records], dtype=np.float64)
    return pred, gt


def mae(records: Sequence[EvalRecord]) -> float:
    """Mean absolute count error."""
    pred, gt = _arrays(records, "MAE")
    return float(np.mean(np.abs(pred - gt)))


def mse(records: Sequence[EvalRecord]) -> float:
    """Root of the mean squared count error."""
    pred, gt = _arrays(records, "MSE")
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def nae(records: Sequence[EvalRecord]) -> float:
    """
    Normalised absolute error

    Args:
        records: Evaluated images

    Returns:
        Mean of |pred − gt| / gt over the records with gt > 0

    Raises:
        DomainError: No record has a positive ground truth
    """
    pred, gt = _arrays(records, "NAE")
    keep = gt > 0
    if not keep.any():
        raise DomainError("NAE is undefined when every ground-truth count is zero")
    return float(np.mean(np.abs(pred[keep] - gt[keep]) / gt[keep]))


def nae_or_none(records: Sequence[EvalRecord]) -> Optional[float]:
    """NAE, or None where it is undefined."""
    if not any(r.gt > 0 for r in records):
        return None
    return nae(records)


def density_level(count: float, bounds: Sequence[int] = NWPU_BOUNDS) -> DensityLevel:
    """
    Scene-level density bucket

    Args:
        count: People in the image
        bounds: Inclusive upper limits of S0..S3, increasing

    Returns:
        The first level whose limit is not exceeded, S4 beyond the last
    """
    if len(bounds) != 4 or list(bounds) != sorted(bounds):
        raise DomainError(
            f"density bounds must be four increasing limits, got {list(bounds)}"
        )
    levels = list(DensityLevel)
    for level, limit in zip(levels, bounds):
        if count <= limit:
            return level
    return levels[-1]


@dataclass
class MetricRow:
    """Metrics of one group of records"""
    name: str
    n: int
    mae: float
    mse: float
    nae: Optional[float]

    @classmethod
    def of(cls, name: str, records: Sequence[EvalRecord]) -> "MetricRow":
        return cls(name, len(records), mae(records), mse(records), nae_or_none(records))


@dataclass
class BucketReport:
    """Overall metrics plus one row per density level present"""
    overall: MetricRow
    levels: List[MetricRow] = field(default_factory=list)

    @property
    def avg_mae(self) -> float:
        """Unweighted mean of the per-level MAE."""
        return float(np.mean([row.mae for row in self.levels]))

    def to_frame(self) -> pd.DataFrame:
        avg = {"name": "Avg", "n": self.overall.n, "mae": self.avg_mae,
               "mse": None, "nae": None}
        rows = [vars(row) for row in self.levels] + [avg, vars(self.overall)]
        return pd.DataFrame(rows).set_index("name")

    def to_dict(self) -> Dict:
        return {
            "overall": vars(self.overall),
            "levels": [vars(row) for row in self.levels],
            "avg_mae": self.avg_mae,
        }


def bucket_report(
    records: Sequence[EvalRecord],
    levels: Optional[Sequence[Union[str, DensityLevel]]] = None,
) -> BucketReport:
    """
    Metrics overall and per density level

    Args:
        records: Evaluated images
        levels: Level of each record; defaults to ``record.level``

    Returns:
        BucketReport whose levels appear in S0..S4 order
    """
    if levels is None:
        levels = [r.level for r in records]
    if len(levels) != len(records):
        raise DomainError(f"{len(records)} records but {len(levels)} levels")
    groups: Dict[str, List[EvalRecord]] = {}
    for record, level in zip(records, levels):
        key = DensityLevel(level).value if level is not None else "unlabelled"
        groups.setdefault(key, []).append(record)
    order = [lvl.value for lvl in DensityLevel] + ["unlabelled"]
    rows = [MetricRow.of(key, groups[key]) for key in order if key in groups]
    return BucketReport(MetricRow.of("overall", records), rows)


def format_table(rows: Union[pd.DataFrame, Iterable[Dict]],
                 floatfmt: str = "{:.4f}") -> str:
    """Plain-text table; None renders as '-'."""
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))

    def cell(value) -> str:
        if value is None or (isinstance(value, float) and np.isnan(value)):
            return "-"
        if isinstance(value, (float, np.floating)):
            return floatfmt.format(value)
        return str(value)

    def numeric(column) -> bool:
        return any(isinstance(v, (float, np.floating)) or v is None for v in column)

    formatters = {col: cell for col in frame.columns if numeric(frame[col])}
    return frame.to_string(formatters=formatters)


def write_jsonl(records: Iterable[EvalRecord], path: Union[str, Path]) -> Path:
    """One ``{id, pred, gt}`` object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps({"id": record.image_id, "pred": record.pred,
                                     "gt": record.gt}) + "\n")
    logger.info(f"Wrote per-image results to {path}")
    return path
