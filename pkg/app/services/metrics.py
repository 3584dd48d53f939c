"""Depth evaluation metrics.

Every metric is computed over pixels (or microlens keys) valid in both the
prediction and the ground truth. Depths are in meters; MSE and RMSE are
reported in centimeters, MARE and the delta accuracies in percent.
"""
import csv
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import NoOverlap, ShapeMismatch, UsageError
from app.models.image import DepthMap
from app.models.metrics import AggregationMode, ComparisonRow, ComparisonTable, MetricsReport
from app.models.pipeline import PipelineConfig
from app.models.stack import SparseDepthMap

logger = logging.getLogger(__name__)

DepthLike = Union[DepthMap, SparseDepthMap]

METRIC_COLUMNS = ("mse", "rmse", "mare", "msre", "delta1", "delta2", "delta3", "bpr")
HIGHER_IS_BETTER = frozenset({"delta1", "delta2", "delta3"})
DELTA_BASE = 1.25
M_TO_CM = 100.0


def paired_values(pred: DepthLike, gt: DepthLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predicted and true depths at jointly valid positions.

    Dense maps are paired pixel by pixel; sparse maps are joined on their
    microlens keys.
    """
    if isinstance(pred, DepthMap) and isinstance(gt, DepthMap):
        if pred.values.shape != gt.values.shape:
            raise ShapeMismatch(f"prediction {pred.values.shape} and ground truth {gt.values.shape} differ in size")
        both = pred.valid & gt.valid
        return pred.values[both], gt.values[both]
    if isinstance(pred, SparseDepthMap) and isinstance(gt, SparseDepthMap):
        truth = gt.depth_by_key()
        pairs = [(d, truth[k]) for k, d in zip(pred.keys(), pred.depths) if k in truth]
        if not pairs:
            return np.zeros(0), np.zeros(0)
        p, g = zip(*pairs)
        return np.array(p, dtype=np.float64), np.array(g, dtype=np.float64)
    raise ShapeMismatch("prediction and ground truth must both be dense or both be sparse")


def _report(pred: np.ndarray, gt: np.ndarray, bpr_threshold: float, mode: AggregationMode) -> MetricsReport:
    diff = pred - gt
    rel = np.abs(diff) / gt
    ratio = np.maximum(pred / gt, gt / pred)
    mse = float(np.mean((diff * M_TO_CM) ** 2))
    return MetricsReport(
        mse=mse,
        rmse=float(np.sqrt(mse)),
        mare=float(np.mean(rel) * 100.0),
        msre=float(np.mean(diff * diff / (gt * gt))),
        delta1=float(np.mean(ratio < DELTA_BASE) * 100.0),
        delta2=float(np.mean(ratio < DELTA_BASE ** 2) * 100.0),
        delta3=float(np.mean(ratio < DELTA_BASE ** 3) * 100.0),
        bpr=float(np.mean(rel > bpr_threshold)),
        valid_count=int(len(gt)),
        mode=mode,
    )


def evaluate(
    pred: Union[DepthLike, Sequence[DepthLike]],
    gt: Union[DepthLike, Sequence[DepthLike]],
    mode: AggregationMode = "pooled",
    bpr_threshold: float = 0.25,
) -> MetricsReport:
    """
    Evaluate one prediction or a list of predictions against ground truth.

    Args:
        pred: Predicted depth (dense or sparse), or a list of them
        gt: Ground truth of the same kind, or a list of equal length
        mode: "pooled" computes every metric over all valid pixels of all
            images; "per-image-mean" averages the per-image values, so RMSE
            is the mean of per-image RMSEs
        bpr_threshold: Relative error above which a pixel counts as bad

    Returns:
        MetricsReport carrying the aggregation mode and the valid count
    """
    preds = list(pred) if isinstance(pred, (list, tuple)) else [pred]
    gts = list(gt) if isinstance(gt, (list, tuple)) else [gt]
    if len(preds) != len(gts):
        raise ShapeMismatch(f"{len(preds)} predictions for {len(gts)} ground-truth maps")

    pairs = [paired_values(p, g) for p, g in zip(preds, gts)]
    pairs = [(p, g) for p, g in pairs if len(g)]
    if not pairs:
        raise NoOverlap("prediction and ground truth share no valid pixel")

    if mode == "pooled":
        report = _report(
            np.concatenate([p for p, _ in pairs]),
            np.concatenate([g for _, g in pairs]),
            bpr_threshold,
            mode,
        )
    else:
        reports = [_report(p, g, bpr_threshold, mode) for p, g in pairs]
        means = {c: float(np.mean([getattr(r, c) for r in reports])) for c in METRIC_COLUMNS}
        report = MetricsReport(**means, valid_count=sum(r.valid_count for r in reports), mode=mode)

    logger.info(
        f"Evaluated {report.valid_count} pixels ({mode}): RMSE {report.rmse:.3f} cm, "
        f"MARE {report.mare:.2f}%, delta1 {report.delta1:.2f}%"
    )
    return report


def compare_reports(named: Sequence[Tuple[str, MetricsReport]], sort_by: str = "rmse") -> ComparisonTable:
    """
    Rank named reports by one column and mark the best row of every column.

    Lower is better except for the delta accuracies. Ties keep the input
    order, and every row tied with the best value is marked.
    """
    if sort_by not in METRIC_COLUMNS:
        raise UsageError(f"unknown metric column '{sort_by}', expected one of {', '.join(METRIC_COLUMNS)}")
    sign = -1.0 if sort_by in HIGHER_IS_BETTER else 1.0
    ordered = sorted(named, key=lambda item: sign * getattr(item[1], sort_by))

    best = {}
    for column in METRIC_COLUMNS:
        values = [getattr(r, column) for _, r in named]
        if values:
            best[column] = max(values) if column in HIGHER_IS_BETTER else min(values)

    rows = [
        ComparisonRow(
            name=name,
            report=report,
            best=[c for c in METRIC_COLUMNS if getattr(report, c) == best[c]],
        )
        for name, report in ordered
    ]
    return ComparisonTable(sort_by=sort_by, rows=rows)


def render_table(table: ComparisonTable) -> str:
    """Aligned plain-text table; best values carry a trailing '*'."""
    header = ["method"] + list(METRIC_COLUMNS) + ["count"]
    body = []
    for row in table.rows:
        cells = [row.name]
        for column in METRIC_COLUMNS:
            mark = "*" if column in row.best else ""
            cells.append(f"{getattr(row.report, column):.4f}{mark}")
        cells.append(str(row.report.valid_count))
        body.append(cells)
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(line, widths)))
             for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_comparison_csv(path: Union[str, Path], table: ComparisonTable) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method"] + list(METRIC_COLUMNS) + ["valid_count", "mode", "best"])
        for row in table.rows:
            writer.writerow(
                [row.name]
                + [repr(getattr(row.report, c)) for c in METRIC_COLUMNS]
                + [row.report.valid_count, row.report.mode, ";".join(row.best)]
            )


def write_metrics_report(path: Union[str, Path], report: MetricsReport) -> None:
    Path(path).write_text(report.model_dump_json(indent=2) + "\n")


def read_metrics_report(path: Union[str, Path]) -> MetricsReport:
    return MetricsReport.model_validate_json(Path(path).read_text())


def random_depth_baseline(gt: DepthLike, seed: int = 0) -> DepthLike:
    """
    Seeded uniform random prediction within the ground-truth depth range.

    Used as the reference row of comparison tables.
    """
    rng = np.random.default_rng(seed)
    if isinstance(gt, DepthMap):
        truth = gt.values[gt.valid]
        if truth.size == 0:
            raise NoOverlap("ground truth has no valid depth")
        values = rng.uniform(truth.min(), truth.max(), size=gt.values.shape)
        return DepthMap(values=values, valid=np.ones_like(gt.valid))
    if len(gt) == 0:
        raise NoOverlap("ground truth has no valid depth")
    depths = rng.uniform(gt.depths.min(), gt.depths.max(), size=len(gt))
    return SparseDepthMap(coords=gt.coords, centroids=gt.centroids, depths=depths, source="predicted")


class DepthEvaluator:
    """Evaluation with the aggregation mode and BPR threshold of a run configuration"""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()

    def evaluate(self, pred, gt) -> MetricsReport:
        return evaluate(pred, gt, mode=self.config.metrics_mode, bpr_threshold=self.config.bpr_threshold)

    def compare(self, named: List[Tuple[str, DepthLike]], gt: DepthLike, sort_by: str = "rmse") -> ComparisonTable:
        """Evaluate several predictions against one ground truth and rank them."""
        return compare_reports([(name, self.evaluate(pred, gt)) for name, pred in named], sort_by=sort_by)
