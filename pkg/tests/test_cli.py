"""
Tests for the command-line interface.
"""

import numpy as np
import pandas as pd
import pytest

from lesionseg.ablation import RunResult
from lesionseg.audit import AuditResult
from lesionseg.autodiff import Tensor
from lesionseg.config import CONFIG_FILE, load_config
from lesionseg.main import build_parser, main


@pytest.fixture
def config_file(tmp_path, tiny_config):
    return str(tiny_config.save(tmp_path / "run.cfg"))


@pytest.mark.unit
class TestParser:
    def test_no_command_prints_help(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().out

    def test_defaults(self):
        args = build_parser().parse_args(["sweep", "--checkpoint", "c", "--data", "d"])
        assert args.split == "val"
        assert args.taus == "0.25 0.35 0.5"
        args = build_parser().parse_args(["audit"])
        assert (args.what, args.trials) == ("all", 100)

    def test_unknown_phase_choice(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--data", "d", "--phases", "two"])


@pytest.mark.unit
class TestCommands:
    def test_config_command(self, tmp_path):
        path = tmp_path / "default.cfg"
        assert main(["config", "--out", str(path)]) == 0
        assert load_config(path).schedule.total_epochs == 40

    def test_gen_train_eval(self, tmp_path, config_file, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        assert main(["gen-data", "--config", config_file, "--out", str(data)]) == 0
        assert main(["train", "--config", config_file, "--data", str(data), "--out", str(run)]) == 0
        assert (run / "final.ckpt").exists()
        assert (run / CONFIG_FILE).exists()

        report_dir = tmp_path / "eval"
        code = main(
            [
                "eval", "--checkpoint", str(run / "final.ckpt"), "--data", str(data),
                "--out", str(report_dir), "--json", "--export-heatmap",
            ]
        )
        assert code == 0
        assert (report_dir / "metrics_test.csv").exists()
        assert (report_dir / "report_test.json").exists()
        assert (report_dir / "heatmaps" / "case_0003" / "header.txt").exists()

        sweep_dir = tmp_path / "sweep"
        code = main(
            [
                "sweep", "--checkpoint", str(run / "final.ckpt"), "--data", str(data),
                "--out", str(sweep_dir), "--taus", "0.5", "--alphas", "0,0.25",
            ]
        )
        assert code == 0
        assert len(pd.read_csv(sweep_dir / "sweep_val.csv")) == 2

    def test_train_seg_only(self, tmp_path, config_file, tiny_dataset, capsys):
        run = tmp_path / "run"
        assert main(["train", "--config", config_file, "--data", str(tiny_dataset), "--out", str(run), "--phases", "seg-only"]) == 0
        assert "final phase seg-only" in capsys.readouterr().out
        assert not (run / "semantic-transfer.ckpt").exists()

    def test_non_finite_loss_exits_nonzero(self, mocker, tmp_path, config_file, tiny_dataset):
        mocker.patch("lesionseg.training.seg_loss", return_value=Tensor(np.array(np.nan)))
        run = tmp_path / "run"
        assert main(["train", "--config", config_file, "--data", str(tiny_dataset), "--out", str(run)]) == 1
        assert (run / "diagnostic.json").exists()

    def test_missing_checkpoint_fails(self, tmp_path, tiny_dataset):
        code = main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(tiny_dataset)])
        assert code == 1

    def test_invalid_config_fails(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("schema_version = 1\nbogus = 1\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1

    def test_keyboard_interrupt(self, mocker, tmp_path, capsys):
        mocker.patch("lesionseg.main.RunConfig.save", side_effect=KeyboardInterrupt)
        assert main(["config", "--out", str(tmp_path / "x.cfg")]) == 1
        assert "Interrupted" in capsys.readouterr().out

    def test_ablate_reports_failed_runs(self, mocker, tmp_path, config_file, capsys):
        table = pd.DataFrame({"Dice": ["failed"]}, index=["L_heat only"])
        failed = RunResult(variant="L_heat only", seed=0, error="NonFiniteError: nan")
        run = mocker.patch("lesionseg.main.run_ablation", return_value=(table, [failed]))
        code = main(["ablate", "--config", config_file, "--data", "d", "--out", str(tmp_path / "a"), "--workers", "3"])
        assert code == 1
        assert run.call_args.args[0].ablation.workers == 3
        assert "FAILED L_heat only" in capsys.readouterr().out

    def test_audit_exit_codes(self, mocker, capsys):
        mocker.patch("lesionseg.main.run_audit", return_value=[AuditResult(name="a", passed=True)])
        assert main(["audit", "--what", "invariants"]) == 0
        mocker.patch(
            "lesionseg.main.run_audit",
            return_value=[AuditResult(name="a", passed=True), AuditResult(name="b", passed=False)],
        )
        assert main(["audit"]) == 1
        assert "1 audit(s) failed: b" in capsys.readouterr().out
