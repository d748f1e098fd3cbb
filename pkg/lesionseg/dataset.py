"""
Synthetic dataset generation and split loading.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from lesionseg.case_io import load_case, save_case
from lesionseg.phantom import CaseSpec, LesionMask, Volume, generate_case

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.csv"
SPLITS = ("train", "val", "test")


class DatasetConfig(BaseModel):
    seed: int = Field(0, description="Dataset seed; case i uses a seed derived from (seed, i)")
    n_train: int = Field(60, ge=0)
    n_val: int = Field(10, ge=0)
    n_test: int = Field(20, ge=0)
    case: CaseSpec = Field(default_factory=CaseSpec)

    @property
    def n_cases(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_of(self, index: int) -> str:
        if index < self.n_train:
            return "train"
        if index < self.n_train + self.n_val:
            return "val"
        return "test"


def case_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def case_id(index: int) -> str:
    return f"case_{index:04d}"


def _build_case(args: tuple[CaseSpec, str, str]) -> dict:
    spec, cid, directory = args
    volume, mask = generate_case(spec, case_id=cid)
    save_case(Path(directory) / cid, volume, mask)
    return {"case_id": cid, "seed": spec.seed, "lesion_count": mask.lesion_count,
            "lesion_voxels": int(mask.data.sum())}


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path, workers: int = 1) -> pd.DataFrame:
    """
    Generate every case, write the case directories and ``manifest.csv``.

    Results do not depend on ``workers``: each case is seeded from
    ``(cfg.seed, index)`` and the manifest keeps index order.

    Returns:
        Manifest with columns case_id, split, seed, lesion_count, lesion_voxels
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [
        (cfg.case.model_copy(update={"seed": case_seed(cfg.seed, i)}), case_id(i), str(out_dir))
        for i in range(cfg.n_cases)
    ]
    logger.info(f"Generating {len(jobs)} cases into {out_dir} with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_build_case, jobs))
    else:
        rows = [_build_case(job) for job in jobs]

    manifest = pd.DataFrame(rows)
    manifest.insert(1, "split", [cfg.split_of(i) for i in range(len(rows))])
    manifest = manifest[["case_id", "split", "seed", "lesion_count", "lesion_voxels"]]
    manifest.to_csv(out_dir / MANIFEST_FILE, index=False)
    counts = manifest["split"].value_counts().to_dict()
    logger.info(f"Dataset written: {counts}")
    return manifest


def read_manifest(data_dir: str | Path) -> pd.DataFrame:
    path = Path(data_dir) / MANIFEST_FILE
    if not path.exists():
        raise FileNotFoundError(f"No manifest at {path}")
    return pd.read_csv(path, dtype={"case_id": str, "split": str})


def load_split(data_dir: str | Path, split: str) -> list[tuple[Volume, LesionMask | None]]:
    """Load the cases of one split in manifest order."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    manifest = read_manifest(data_dir)
    ids = manifest.loc[manifest["split"] == split, "case_id"].tolist()
    logger.info(f"Loading {len(ids)} {split} case(s) from {data_dir}")
    return [load_case(Path(data_dir) / cid) for cid in ids]
