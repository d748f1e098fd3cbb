"""
End-to-end tests: generate data, train, checkpoint and evaluate.

The overfit run takes a few minutes on one CPU core and is marked slow.
"""

import numpy as np
import pytest

from lesionseg.backbone import BackboneConfig
from lesionseg.checkpoint import restore_model
from lesionseg.config import RunConfig
from lesionseg.curriculum import Phase, ScheduleConfig
from lesionseg.dataset import DatasetConfig, load_split
from lesionseg.evaluation import evaluate_cases, mean_dice
from lesionseg.phantom import CaseSpec, generate_case
from lesionseg.training import FINAL_CHECKPOINT, train


@pytest.mark.integration
class TestTrainEvalConsistency:
    def test_checkpoint_reproduces_training_dice(self, tiny_config, tiny_dataset, tmp_path):
        train_cases = load_split(tiny_dataset, "train")
        _, summary = train(tiny_config, train_cases, load_split(tiny_dataset, "val"), tmp_path)
        cfg, model, ckpt = restore_model(tmp_path / FINAL_CHECKPOINT)
        assert ckpt.phase == Phase.AUX_OFF_REFINE.value
        assert ckpt.epoch == tiny_config.schedule.total_epochs - 1
        assert mean_dice(model, train_cases, cfg.metrics) == pytest.approx(summary.train_dice, abs=1e-6)

    def test_phase_checkpoints_restore(self, tiny_config, tiny_dataset, tmp_path):
        train(tiny_config, load_split(tiny_dataset, "train"), out_dir=tmp_path)
        _, seg_only, _ = restore_model(tmp_path / "seg-only.ckpt")
        _, final, _ = restore_model(tmp_path / FINAL_CHECKPOINT)
        assert not seg_only.has_refiner
        assert final.has_refiner
        metrics = evaluate_cases(final, load_split(tiny_dataset, "test"), tiny_config.metrics)
        assert len(metrics) == 1
        assert 0.0 <= metrics[0].dice <= 1.0


@pytest.mark.integration
@pytest.mark.slow
class TestOverfit:
    def test_single_case_seg_only_overfits(self):
        """200 seg-only steps on one case push training Dice above 0.9."""
        case_spec = CaseSpec(
            seed=11,
            extents=(8, 16, 16),
            spacing=(1.0, 1.0, 1.0),
            lesion_count=(1, 1),
            lesion_radius_mm=(2.5, 3.0),
            noise_level=0.1,
        )
        cfg = RunConfig(
            seed=0,
            precision="float64",
            backbone=BackboneConfig(
                modalities=3, levels=2, base_channels=4, input_extents=(8, 16, 16), text_dim=8
            ),
            schedule=ScheduleConfig(
                total_epochs=22,
                phase1_end=20,
                phase2_end=21,
                warmup_epochs=0,
                ramp_epochs=1,
                steps_per_epoch=10,
                batch_size=1,
            ),
            data=DatasetConfig(n_train=1, n_val=0, n_test=0, case=case_spec),
        )
        cases = [generate_case(case_spec, "case_0000")]
        assert cases[0][1].data.any()
        _, summary = train(cfg, cases, stop_after=Phase.SEG_ONLY)
        assert summary.epochs_run * cfg.schedule.steps_per_epoch == 200
        assert summary.final_phase == Phase.SEG_ONLY.value
        assert np.isfinite(summary.train_dice)
        assert summary.train_dice > 0.9
