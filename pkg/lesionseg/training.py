"""
Phase-scheduled training loop.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from lesionseg.autodiff import Tensor, get_default_dtype
from lesionseg.checkpoint import save_checkpoint
from lesionseg.config import RunConfig
from lesionseg.curriculum import SGD, PatchSampler, Phase, PhaseState, clip_grad_norm, phase_at, poly_lr
from lesionseg.errors import NonFiniteError
from lesionseg.evaluation import mean_dice
from lesionseg.model import TextGuidedSegmenter
from lesionseg.objectives import (
    LossBreakdown,
    align_loss,
    composite,
    downsample_mask,
    heat_loss,
    seg_loss,
)
from lesionseg.phantom import LesionMask, Volume

logger = logging.getLogger(__name__)

EPOCH_LOG_FILE = "epoch_log.csv"
SUMMARY_FILE = "train_summary.json"
DIAGNOSTIC_FILE = "diagnostic.json"
FINAL_CHECKPOINT = "final.ckpt"
EPOCH_LOG_COLUMNS = [
    "epoch",
    "phase",
    "lambda_align",
    "lambda_heat",
    "seg",
    "align",
    "heat",
    "total",
    "lr",
]


class TrainSummary(BaseModel):
    epochs_run: int
    final_phase: str
    transitions: list[str] = Field(default_factory=list, description="'<from> -> <to> @ epoch'")
    checkpoints: list[str] = Field(default_factory=list)
    train_dice: float | None = None
    val_dice: dict[str, float] = Field(
        default_factory=dict, description="Validation Dice keyed by phase boundary or 'final'"
    )


class Diagnostic(BaseModel):
    epoch: int
    step: int
    phase: str
    losses: LossBreakdown


class Trainer:
    """
    Runs the curriculum for one model.

    The refiner is attached with gate 0 when the schedule first enables it and
    only then added to the optimizer. The learning rate follows one global
    polynomial decay across phases.
    """

    def __init__(
        self,
        cfg: RunConfig,
        train_cases: list[tuple[Volume, LesionMask]],
        val_cases: list[tuple[Volume, LesionMask]] | None = None,
        out_dir: str | Path | None = None,
        model: TextGuidedSegmenter | None = None,
        stop_after: Phase | None = None,
    ):
        self.cfg = cfg
        self.schedule = cfg.schedule
        self.train_cases = train_cases
        self.val_cases = val_cases or []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.stop_after = stop_after
        self.model = model or TextGuidedSegmenter(cfg.backbone, cfg.guidance, seed=cfg.seed)
        self.optimizer = SGD(
            self.model.named_parameters(),
            momentum=self.schedule.momentum,
            nesterov=self.schedule.nesterov,
            weight_decay=self.schedule.weight_decay,
        )
        self.sampler = PatchSampler(
            train_cases,
            cfg.backbone.input_extents,
            lesion_fraction=self.schedule.lesion_fraction,
            seed=cfg.seed,
        )
        self.rows: list[dict] = []
        self.summary = TrainSummary(epochs_run=0, final_phase=Phase.SEG_ONLY.value)

    # ---- steps ----------------------------------------------------------------

    def _enable_refiner(self) -> None:
        if self.model.has_refiner:
            return
        refiner = self.model.attach_refiner(self.cfg.refiner)
        self.optimizer.add_params(refiner.named_parameters("refiner/"))

    def losses(self, x: np.ndarray, m: np.ndarray, state: PhaseState) -> tuple[Tensor, LossBreakdown]:
        out = self.model(Tensor(x.astype(get_default_dtype())), use_refiner=state.refiner_enabled)
        m_s = downsample_mask(m, self.cfg.backbone.bottleneck_extents)
        return composite(
            seg_loss(out.y, m),
            align_loss(out.s, m_s),
            heat_loss(out.s, m_s),
            state.lambda_align,
            state.lambda_heat,
        )

    def _dump_diagnostic(self, epoch: int, step: int, state: PhaseState, breakdown: LossBreakdown) -> None:
        logger.error(
            f"Non-finite loss at epoch {epoch}, step {step} ({state.phase.value}): "
            f"{breakdown.model_dump()}"
        )
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            diagnostic = Diagnostic(epoch=epoch, step=step, phase=state.phase.value, losses=breakdown)
            (self.out_dir / DIAGNOSTIC_FILE).write_text(
                diagnostic.model_dump_json(indent=2), encoding="utf-8"
            )
            self._write_log()

    def train_epoch(self, epoch: int, state: PhaseState) -> dict:
        lr = poly_lr(epoch, self.schedule.total_epochs, self.schedule.learning_rate, self.schedule.poly_power)
        totals = {"seg": 0.0, "align": 0.0, "heat": 0.0, "total": 0.0}
        for step in range(self.schedule.steps_per_epoch):
            x, m = self.sampler.sample_batch(self.schedule.batch_size)
            self.optimizer.zero_grad()
            total, breakdown = self.losses(x, m, state)
            if not breakdown.is_finite():
                self._dump_diagnostic(epoch, step, state, breakdown)
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}")
            total.backward()
            if self.schedule.grad_clip is not None:
                clip_grad_norm(list(self.optimizer.params.values()), self.schedule.grad_clip)
            self.optimizer.step(lr)
            for key in totals:
                totals[key] += getattr(breakdown, key)
        n = self.schedule.steps_per_epoch
        return {
            "epoch": epoch,
            "phase": state.phase.value,
            "lambda_align": state.lambda_align,
            "lambda_heat": state.lambda_heat,
            **{key: value / n for key, value in totals.items()},
            "lr": lr,
        }

    # ---- run ------------------------------------------------------------------

    def _checkpoint(self, name: str, phase: Phase, epoch: int) -> None:
        if self.out_dir is None:
            return
        path = save_checkpoint(self.out_dir / name, self.model, self.cfg.dumps(), phase.value, epoch)
        self.summary.checkpoints.append(path.name)

    def _validate(self, label: str) -> None:
        if not self.val_cases:
            return
        dice = mean_dice(self.model, self.val_cases, self.cfg.metrics)
        self.summary.val_dice[label] = dice
        logger.info(f"Validation Dice after {label}: {dice:.4f}")

    def _write_log(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.rows, columns=EPOCH_LOG_COLUMNS)
        frame.to_csv(self.out_dir / EPOCH_LOG_FILE, index=False)

    def train(self) -> TrainSummary:
        """
        Run every epoch of the schedule (or up to the end of ``stop_after``).

        Returns:
            Summary of the run; also written to ``train_summary.json`` with the
            epoch log and checkpoints when an output directory is set

        Raises:
            NonFiniteError: If a loss evaluates to NaN or Inf
        """
        total_epochs = self.schedule.total_epochs
        logger.info(
            f"Training {total_epochs} epochs x {self.schedule.steps_per_epoch} steps "
            f"on {len(self.train_cases)} case(s)"
        )
        state = phase_at(0, self.schedule)
        for epoch in range(total_epochs):
            state = phase_at(epoch, self.schedule)
            if state.refiner_enabled:
                self._enable_refiner()
            row = self.train_epoch(epoch, state)
            self.rows.append(row)
            self.summary.epochs_run = epoch + 1
            logger.info(
                f"Epoch {epoch} [{state.phase.value}] total={row['total']:.4f} "
                f"seg={row['seg']:.4f} align={row['align']:.4f} heat={row['heat']:.4f} lr={row['lr']:.2e}"
            )

            next_phase = phase_at(epoch + 1, self.schedule).phase if epoch + 1 < total_epochs else None
            if next_phase is not None and next_phase != state.phase:
                self.summary.transitions.append(f"{state.phase.value} -> {next_phase.value} @ {epoch + 1}")
                logger.info(f"Phase transition {state.phase.value} -> {next_phase.value} at epoch {epoch + 1}")
                self._checkpoint(f"{state.phase.value}.ckpt", state.phase, epoch)
                self._validate(state.phase.value)
                if self.stop_after == state.phase:
                    logger.info(f"Stopping after phase {state.phase.value}")
                    break

        self.summary.final_phase = state.phase.value
        self._checkpoint(FINAL_CHECKPOINT, state.phase, self.summary.epochs_run - 1)
        self._validate("final")
        self.summary.train_dice = mean_dice(self.model, self.train_cases, self.cfg.metrics)
        logger.info(f"Final training Dice: {self.summary.train_dice:.4f}")
        self._write_log()
        if self.out_dir is not None:
            (self.out_dir / SUMMARY_FILE).write_text(
                self.summary.model_dump_json(indent=2), encoding="utf-8"
            )
        return self.summary


def train(
    cfg: RunConfig,
    train_cases: list[tuple[Volume, LesionMask]],
    val_cases: list[tuple[Volume, LesionMask]] | None = None,
    out_dir: str | Path | None = None,
    stop_after: Phase | None = None,
) -> tuple[TextGuidedSegmenter, TrainSummary]:
    trainer = Trainer(cfg, train_cases, val_cases, out_dir, stop_after=stop_after)
    summary = trainer.train()
    return trainer.model, summary
