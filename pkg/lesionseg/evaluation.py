"""
Inference, split evaluation, gating sweeps and report files.
"""

import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy.special import expit

from lesionseg.autodiff import Tensor, get_default_dtype, no_grad
from lesionseg.case_io import save_case
from lesionseg.guidance import upsample_heatmap
from lesionseg.metrics import (
    AggregateReport,
    CaseMetrics,
    MetricConfig,
    aggregate,
    cases_frame,
    evaluate_case,
)
from lesionseg.model import TextGuidedSegmenter
from lesionseg.phantom import LesionMask, Volume
from lesionseg.refiner import confidence_blend

logger = logging.getLogger(__name__)

HEATMAP_MODALITY = "heatmap"


class EvaluationReport(BaseModel):
    split: str
    aggregate: AggregateReport
    cases: list[CaseMetrics]


class Prediction(BaseModel):
    """Full-volume outputs of one case, averaged where tiles overlap."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    y: np.ndarray
    y_base: np.ndarray
    y_ref: np.ndarray | None = None
    heatmap: np.ndarray | None = None

    @property
    def probabilities(self) -> np.ndarray:
        return expit(self.y)


def tile_starts(extent: int, patch: int) -> list[int]:
    """Tile offsets covering ``[0, extent)``; the last tile is aligned to the end."""
    if patch > extent:
        raise ValueError(f"patch extent {patch} exceeds volume extent {extent}")
    starts = list(range(0, extent - patch + 1, patch))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def predict(model: TextGuidedSegmenter, volume: Volume) -> Prediction:
    """Run the model over a whole volume in patch-sized tiles, without gradients."""
    patch = tuple(model.backbone_cfg.input_extents)
    data = volume.data.astype(get_default_dtype())
    sums: dict[str, np.ndarray] = {}
    counts = np.zeros(volume.extents)

    grid = [tile_starts(n, p) for n, p in zip(volume.extents, patch, strict=True)]
    with no_grad():
        for z in grid[0]:
            for y in grid[1]:
                for x in grid[2]:
                    window = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                    out = model(Tensor(data[(slice(None),) + window][None]))
                    tile = {
                        "y": out.y.data[0, 0],
                        "y_base": out.y_base.data[0, 0],
                        "heatmap": upsample_heatmap(out.heatmap, patch).data[0, 0],
                    }
                    if out.refine is not None:
                        tile["y_ref"] = out.refine.y_ref.data[0, 0]
                    for key, values in tile.items():
                        sums.setdefault(key, np.zeros(volume.extents))[window] += values
                    counts[window] += 1
    averaged = {key: values / counts for key, values in sums.items()}
    return Prediction(**averaged)


def evaluate_cases(
    model: TextGuidedSegmenter,
    cases: Sequence[tuple[Volume, LesionMask]],
    cfg: MetricConfig | None = None,
) -> list[CaseMetrics]:
    cfg = cfg or MetricConfig()
    results = []
    for volume, mask in cases:
        if mask is None:
            raise ValueError(f"case {volume.case_id} has no ground-truth mask")
        prediction = predict(model, volume)
        metrics = evaluate_case(
            prediction.probabilities, mask.data, volume.spacing, cfg, case_id=volume.case_id
        )
        logger.debug(f"{volume.case_id}: dice={metrics.dice:.4f}")
        results.append(metrics)
    return results


def mean_dice(
    model: TextGuidedSegmenter,
    cases: Sequence[tuple[Volume, LesionMask]],
    cfg: MetricConfig | None = None,
) -> float:
    return float(np.mean([m.dice for m in evaluate_cases(model, cases, cfg)]))


def export_heatmaps(
    model: TextGuidedSegmenter, volumes: Sequence[Volume], out_dir: str | Path
) -> list[Path]:
    """Write the upsampled similarity heatmap of each case as a one-channel case directory."""
    out_dir = Path(out_dir)
    written = []
    for volume in volumes:
        heatmap = predict(model, volume).heatmap
        export = Volume(
            case_id=volume.case_id,
            modalities=(HEATMAP_MODALITY,),
            data=heatmap[None].astype(volume.data.dtype),
            spacing=volume.spacing,
        )
        written.append(save_case(out_dir / volume.case_id, export))
    logger.info(f"Exported {len(written)} heatmap(s) to {out_dir}")
    return written


def write_report(
    out_dir: str | Path,
    cases: Sequence[CaseMetrics],
    split: str,
    structured: bool = False,
) -> AggregateReport:
    """
    Write ``metrics_<split>.csv``, ``summary_<split>.txt`` and, if requested,
    ``report_<split>.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = aggregate(cases)
    cases_frame(cases).to_csv(out_dir / f"metrics_{split}.csv", index=False)
    table = report.format_table()
    (out_dir / f"summary_{split}.txt").write_text(
        f"# split={split} cases={report.n_cases} (HD95 in mm)\n{table}\n", encoding="utf-8"
    )
    if structured:
        structured_report = EvaluationReport(split=split, aggregate=report, cases=list(cases))
        (out_dir / f"report_{split}.json").write_text(
            structured_report.model_dump_json(indent=2), encoding="utf-8"
        )
    logger.info(f"Evaluation on {split} ({report.n_cases} cases):\n{table}")
    return report


def sweep_gating(
    model: TextGuidedSegmenter,
    cases: Sequence[tuple[Volume, LesionMask]],
    taus: Sequence[float] = (0.25, 0.35, 0.5),
    alphas: Sequence[float] = (0.0, 0.25, 0.5),
    cfg: MetricConfig | None = None,
) -> pd.DataFrame:
    """
    Dice and NSD of a trained refiner model over a grid of blend settings.

    y_base and y_ref do not depend on tau or alpha, so each case is predicted
    once and re-blended per grid point. The blend is applied to tile-averaged
    logits, so where tiles overlap a grid point can differ slightly from
    ``predict``, which blends each tile before averaging.
    """
    if not model.has_refiner:
        raise ValueError("gating sweep needs a checkpoint with a refiner")
    cfg = cfg or MetricConfig()
    predictions = [(volume, mask, predict(model, volume)) for volume, mask in cases]
    rows = []
    for tau in taus:
        for alpha in alphas:
            per_case = []
            for volume, mask, pred in predictions:
                y, _ = confidence_blend(Tensor(pred.y_base), Tensor(pred.y_ref), tau, alpha)
                probabilities = expit(y.data)
                per_case.append(
                    evaluate_case(probabilities, mask.data, volume.spacing, cfg, volume.case_id)
                )
            report = aggregate(per_case)
            rows.append(
                {
                    "tau": tau,
                    "alpha": alpha,
                    "dice_mean": report.metrics["dice"].mean,
                    "dice_std": report.metrics["dice"].std,
                    "nsd_mean": report.metrics["nsd"].mean,
                    "nsd_std": report.metrics["nsd"].std,
                }
            )
            logger.info(f"tau={tau} alpha={alpha}: dice={report.metrics['dice'].mean:.4f}")
    return pd.DataFrame(rows)
