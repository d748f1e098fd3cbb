"""
Configuration file for pytest.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add the project root to the Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

# Set up test environment variables
os.environ.setdefault("LESIONSEG_LOG_LEVEL", "INFO")
os.environ.setdefault("LESIONSEG_DETECT_ANOMALY", "0")

from lesionseg.autodiff import detect_anomaly, set_default_dtype  # noqa: E402
from lesionseg.backbone import BackboneConfig  # noqa: E402
from lesionseg.config import RunConfig  # noqa: E402
from lesionseg.curriculum import ScheduleConfig  # noqa: E402
from lesionseg.dataset import DatasetConfig, generate_dataset  # noqa: E402
from lesionseg.phantom import CaseSpec, generate_case  # noqa: E402
from lesionseg.refiner import RefinerConfig  # noqa: E402


@pytest.fixture(autouse=True)
def float64_engine():
    """Every test runs the engine in double precision without anomaly checks."""
    set_default_dtype("float64")
    detect_anomaly(False)
    yield
    set_default_dtype("float64")
    detect_anomaly(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone():
    return BackboneConfig(
        modalities=3, levels=2, base_channels=2, input_extents=(4, 8, 8), text_dim=4
    )


@pytest.fixture
def tiny_refiner():
    return RefinerConfig(hidden=4, heads=2, num_text_tokens=2)


@pytest.fixture
def tiny_case_spec():
    return CaseSpec(
        extents=(4, 8, 8),
        spacing=(1.0, 1.0, 1.0),
        lesion_count=(1, 1),
        lesion_radius_mm=(1.0, 1.5),
    )


@pytest.fixture
def tiny_schedule():
    return ScheduleConfig(
        total_epochs=5,
        phase1_end=1,
        phase2_end=3,
        warmup_epochs=0,
        ramp_epochs=1,
        steps_per_epoch=1,
        batch_size=1,
    )


@pytest.fixture
def tiny_config(tiny_backbone, tiny_refiner, tiny_schedule, tiny_case_spec):
    return RunConfig(
        seed=0,
        precision="float64",
        backbone=tiny_backbone,
        refiner=tiny_refiner,
        schedule=tiny_schedule,
        data=DatasetConfig(seed=0, n_train=2, n_val=1, n_test=1, case=tiny_case_spec),
    )


@pytest.fixture
def tiny_cases(tiny_case_spec):
    return [
        generate_case(tiny_case_spec.model_copy(update={"seed": seed}), f"case_{seed:04d}")
        for seed in range(2)
    ]


@pytest.fixture
def tiny_dataset(tmp_path, tiny_config):
    data_dir = tmp_path / "data"
    generate_dataset(tiny_config.data, data_dir)
    return data_dir
