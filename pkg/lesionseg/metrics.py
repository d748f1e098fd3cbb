"""
Overlap and surface-distance metrics with physical spacing.

Surface metrics follow one convention throughout: a foreground voxel is on the
surface iff one of its six face neighbours is background or lies outside the
volume, and surface points are voxel centers scaled by the spacing (mm).
"""

import logging
from collections.abc import Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import ndimage
from scipy.spatial import cKDTree

from lesionseg.errors import ShapeError

logger = logging.getLogger(__name__)

FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
METRIC_COLUMNS = {
    "dice": "Dice",
    "precision": "Precision",
    "recall": "Recall",
    "hd95": "HD95 (mm)",
    "nsd": "NSD",
}


class MetricConfig(BaseModel):
    nsd_tolerance_mm: float = Field(2.0, gt=0, description="NSD tolerance in mm")
    threshold: float = Field(0.5, gt=0, lt=1, description="Probability binarisation threshold")


class CaseMetrics(BaseModel):
    """Metrics of one case; surface metrics are None when exactly one mask is empty."""

    case_id: str = ""
    dice: float = Field(..., ge=0, le=1)
    precision: float = Field(..., ge=0, le=1)
    recall: float = Field(..., ge=0, le=1)
    hd95: float | None = Field(None, ge=0, description="mm")
    nsd: float | None = Field(None, ge=0, le=1)


def _check_extents(pred: np.ndarray, ref: np.ndarray) -> None:
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction extents {pred.shape} differ from reference {ref.shape}")


def overlap_metrics(
    pred: np.ndarray, ref: np.ndarray, threshold: float = 0.5
) -> tuple[float, float, float]:
    """
    Dice, precision and recall from voxel-wise confusion counts.

    ``pred`` is binarised at ``> threshold``; ``ref`` is foreground where
    non-zero. Two empty masks score 1 on all three. Otherwise a ratio with a
    zero denominator scores 0.
    """
    pred, ref = np.asarray(pred), np.asarray(ref)
    _check_extents(pred, ref)
    p, r = pred > threshold, ref > 0
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dice = 2 * tp / (2 * tp + fp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return dice, precision, recall


def surface_extract(mask: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """
    Boundary voxel centers of a binary mask in mm.

    Returns:
        ``(n, 3)`` array; empty for an empty mask
    """
    mask = np.asarray(mask) > 0
    if mask.ndim != 3:
        raise ShapeError(f"surface extraction needs a 3D mask, got shape {mask.shape}")
    interior = ndimage.binary_erosion(mask, structure=FACE_CONNECTIVITY, border_value=0)
    boundary = mask & ~interior
    return np.argwhere(boundary) * np.asarray(spacing, dtype=np.float64)


def _directed_distances(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    distances, _ = cKDTree(target).query(source)
    return np.asarray(distances, dtype=np.float64)


def hd95(pred_surface: np.ndarray, ref_surface: np.ndarray) -> float | None:
    """
    95th-percentile Hausdorff distance in mm.

    The larger of the two directed 95th percentiles of nearest-neighbour
    distances (linear interpolation between order statistics). None if either
    surface is empty.
    """
    if len(pred_surface) == 0 or len(ref_surface) == 0:
        return None
    forward = np.percentile(_directed_distances(pred_surface, ref_surface), 95)
    backward = np.percentile(_directed_distances(ref_surface, pred_surface), 95)
    return float(max(forward, backward))


def nsd(pred_surface: np.ndarray, ref_surface: np.ndarray, tol_mm: float = 2.0) -> float | None:
    """Share of both surfaces lying within ``tol_mm`` of the other; None if either is empty."""
    if tol_mm <= 0:
        raise ValueError(f"NSD tolerance must be positive, got {tol_mm}")
    if len(pred_surface) == 0 or len(ref_surface) == 0:
        return None
    close_pred = np.count_nonzero(_directed_distances(pred_surface, ref_surface) <= tol_mm)
    close_ref = np.count_nonzero(_directed_distances(ref_surface, pred_surface) <= tol_mm)
    return float((close_pred + close_ref) / (len(pred_surface) + len(ref_surface)))


def evaluate_case(
    pred: np.ndarray,
    ref: np.ndarray,
    spacing: Sequence[float],
    cfg: MetricConfig | None = None,
    case_id: str = "",
) -> CaseMetrics:
    """All five metrics for one case. Two empty masks give HD95 0 and NSD 1."""
    cfg = cfg or MetricConfig()
    pred, ref = np.asarray(pred), np.asarray(ref)
    dice, precision, recall = overlap_metrics(pred, ref, cfg.threshold)
    pred_bin, ref_bin = pred > cfg.threshold, ref > 0
    if not pred_bin.any() and not ref_bin.any():
        return CaseMetrics(
            case_id=case_id, dice=dice, precision=precision, recall=recall, hd95=0.0, nsd=1.0
        )
    pred_surface = surface_extract(pred_bin, spacing)
    ref_surface = surface_extract(ref_bin, spacing)
    return CaseMetrics(
        case_id=case_id,
        dice=dice,
        precision=precision,
        recall=recall,
        hd95=hd95(pred_surface, ref_surface),
        nsd=nsd(pred_surface, ref_surface, cfg.nsd_tolerance_mm),
    )


class MetricSummary(BaseModel):
    mean: float | None = None
    std: float | None = None
    n_defined: int = 0
    n_undefined: int = 0

    def format(self, digits: int = 4) -> str:
        if self.mean is None:
            return "undefined"
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"


class AggregateReport(BaseModel):
    """Mean and population std per metric over the cases where it is defined."""

    n_cases: int
    metrics: dict[str, MetricSummary]

    def row(self, digits: int = 4) -> dict[str, str]:
        return {label: self.metrics[key].format(digits) for key, label in METRIC_COLUMNS.items()}

    def to_frame(self, label: str = "mean ± std") -> pd.DataFrame:
        return pd.DataFrame([self.row()], index=[label], columns=list(METRIC_COLUMNS.values()))

    def format_table(self) -> str:
        return self.to_frame().to_string()


def aggregate(cases: Sequence[CaseMetrics]) -> AggregateReport:
    """
    Reduce per-case metrics in the given order.

    Raises:
        ValueError: If no cases are given
    """
    if not cases:
        raise ValueError("cannot aggregate an empty case list")
    summaries = {}
    for key in METRIC_COLUMNS:
        values = [getattr(c, key) for c in cases]
        defined = np.array([v for v in values if v is not None], dtype=np.float64)
        undefined = len(values) - len(defined)
        if len(defined):
            summaries[key] = MetricSummary(
                mean=float(defined.mean()),
                std=float(defined.std()),
                n_defined=len(defined),
                n_undefined=undefined,
            )
        else:
            summaries[key] = MetricSummary(n_undefined=undefined)
        if undefined:
            logger.info(f"{METRIC_COLUMNS[key]} undefined for {undefined} of {len(values)} case(s)")
    return AggregateReport(n_cases=len(cases), metrics=summaries)


def cases_frame(cases: Sequence[CaseMetrics]) -> pd.DataFrame:
    """Per-case table; undefined surface metrics are empty cells."""
    frame = pd.DataFrame([c.model_dump() for c in cases])
    return frame.rename(columns={"hd95": "hd95_mm"})
