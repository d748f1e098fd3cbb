"""
Ablation harness over the auxiliary-loss and refiner variants.

Each variant is trained once per seed on the train split and evaluated on the
test split; the table pools cases across seeds. A failing run is recorded and
the remaining runs continue.
"""

import logging
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd
from pydantic import BaseModel, Field

from lesionseg.config import RunConfig, load_config_text
from lesionseg.dataset import load_split
from lesionseg.evaluation import evaluate_cases
from lesionseg.metrics import METRIC_COLUMNS, CaseMetrics, aggregate
from lesionseg.training import train

logger = logging.getLogger(__name__)

ABLATION_TABLE = "ablation_table.csv"
ABLATION_RUNS = "ablation_runs.csv"


class Variant(BaseModel):
    name: str
    schedule: dict = Field(..., description="Overrides applied to the schedule config")


VARIANTS: tuple[Variant, ...] = (
    Variant(name="L_heat only", schedule={"lambda_align": 0.0, "use_refiner": False}),
    Variant(name="L_align only", schedule={"lambda_heat": 0.0, "use_refiner": False}),
    Variant(name="L_heat+L_align", schedule={"use_refiner": False}),
    Variant(name="L_heat+L_align+attn (unscheduled)", schedule={"scheduled": False}),
    Variant(name="L_heat+L_align+attn (phase-scheduled)", schedule={}),
)


def variant_config(cfg: RunConfig, variant: Variant, seed: int) -> RunConfig:
    schedule = cfg.schedule.model_copy(update=variant.schedule)
    schedule = type(schedule).model_validate(schedule.model_dump())
    return cfg.model_copy(update={"seed": seed, "schedule": schedule})


class RunResult(BaseModel):
    variant: str
    seed: int
    cases: list[CaseMetrics] = Field(default_factory=list)
    error: str | None = None


def run_variant(
    cfg_text: str, variant_name: str, seed: int, data_dir: str, out_dir: str | None
) -> RunResult:
    """Train and test one (variant, seed); exceptions become a failed result."""
    try:
        variant = next(v for v in VARIANTS if v.name == variant_name)
        cfg = variant_config(load_config_text(cfg_text), variant, seed)
        cfg.apply_precision()
        train_cases = load_split(data_dir, "train")
        val_cases = load_split(data_dir, "val")
        test_cases = load_split(data_dir, "test")
        run_dir = None
        if out_dir is not None:
            slug = variant.name.replace(" ", "_").replace("+", "-").replace("(", "").replace(")", "")
            run_dir = Path(out_dir) / f"{slug}_seed{seed}"
        model, _ = train(cfg, train_cases, val_cases, run_dir)
        return RunResult(variant=variant_name, seed=seed, cases=evaluate_cases(model, test_cases, cfg.metrics))
    except Exception as e:
        logger.error(f"Variant {variant_name!r} seed {seed} failed: {e}")
        return RunResult(variant=variant_name, seed=seed, error=f"{type(e).__name__}: {e}")


def _run_job(job: tuple) -> RunResult:
    return run_variant(*job)


def ablation_table(results: list[RunResult]) -> pd.DataFrame:
    """One row per variant (in declaration order) and one column per metric."""
    rows = []
    for variant in VARIANTS:
        runs = [r for r in results if r.variant == variant.name]
        cases = [c for r in runs if r.error is None for c in r.cases]
        if cases:
            row = aggregate(cases).row()
        else:
            row = {label: "failed" for label in METRIC_COLUMNS.values()}
        row["Variant"] = variant.name
        rows.append(row)
    frame = pd.DataFrame(rows).set_index("Variant")
    return frame[list(METRIC_COLUMNS.values())]


def run_ablation(
    cfg: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path | None = None,
    runner: Callable[..., RunResult] = run_variant,
) -> tuple[pd.DataFrame, list[RunResult]]:
    """
    Run every variant for every configured seed.

    Returns:
        (table, results): the variant-by-metric table and the raw run results
    """
    seeds = cfg.ablation.seeds
    workers = cfg.ablation.workers
    cfg_text = cfg.dumps()
    jobs = [
        (cfg_text, variant.name, seed, str(data_dir), str(out_dir) if out_dir else None)
        for variant in VARIANTS
        for seed in seeds
    ]
    logger.info(f"Ablation: {len(VARIANTS)} variants x {len(seeds)} seeds, {workers} worker(s)")
    if workers > 1 and runner is run_variant:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [runner(*job) for job in jobs]

    table = ablation_table(results)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / ABLATION_TABLE)
        (out_dir / "ablation_table.txt").write_text(table.to_string() + "\n", encoding="utf-8")
        pd.DataFrame(
            [{"variant": r.variant, "seed": r.seed, "cases": len(r.cases), "error": r.error} for r in results]
        ).to_csv(out_dir / ABLATION_RUNS, index=False)
    failed = [r for r in results if r.error is not None]
    if failed:
        logger.warning(f"{len(failed)} ablation run(s) failed")
    logger.info(f"Ablation results:\n{table.to_string()}")
    return table, results
