"""
Three-phase training schedule, optimizer and lesion-aware patch sampling.

Phase 1 trains segmentation only. Phase 2 switches on the alignment and
heatmap auxiliaries after a warm-up, ramping their weights linearly to the
targets. Phase 3 turns the auxiliaries off again and trains with the gated
refiner attached.
"""

import logging
from enum import Enum

import numpy as np
from pydantic import BaseModel, Field, model_validator

from lesionseg.errors import ScheduleError, ShapeError
from lesionseg.nn import Parameter
from lesionseg.phantom import LesionMask, Volume

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    SEG_ONLY = "seg-only"
    SEMANTIC_TRANSFER = "semantic-transfer"
    AUX_OFF_REFINE = "aux-off-refine"
    UNSCHEDULED = "unscheduled"


class PhaseState(BaseModel):
    """Curriculum position at one epoch."""

    phase: Phase
    epoch: int = Field(..., ge=0)
    lambda_align: float = Field(..., ge=0, description="Effective alignment weight")
    lambda_heat: float = Field(..., ge=0, description="Effective heatmap weight")
    refiner_enabled: bool


class ScheduleConfig(BaseModel):
    """
    Epoch layout, loss-weight targets and optimizer settings.

    Phase boundaries, warm-up and ramp left unset resolve to 40% / 80% of
    ``total_epochs`` and 5% / 10% of it (the ramp at least one epoch).
    """

    total_epochs: int = Field(40, ge=1)
    phase1_end: int | None = Field(None, ge=0, description="e1: first Phase-2 epoch")
    phase2_end: int | None = Field(None, ge=0, description="e2: first Phase-3 epoch")
    warmup_epochs: int | None = Field(None, ge=0, description="w: zero-weight epochs after e1")
    ramp_epochs: int | None = Field(None, ge=1, description="r: linear ramp length")
    lambda_align: float = Field(0.1, ge=0, description="Alignment weight target")
    lambda_heat: float = Field(0.1, ge=0, description="Heatmap weight target")
    use_refiner: bool = Field(True, description="Run Phase 3 with the refiner")
    scheduled: bool = Field(True, description="False: auxiliaries and refiner from epoch 0")
    steps_per_epoch: int = Field(10, ge=1)
    batch_size: int = Field(2, ge=1)
    learning_rate: float = Field(1e-2, gt=0)
    momentum: float = Field(0.99, ge=0, lt=1)
    nesterov: bool = True
    poly_power: float = Field(0.9, ge=0)
    weight_decay: float = Field(3e-5, ge=0)
    grad_clip: float | None = Field(12.0, gt=0, description="Global gradient-norm clip")
    lesion_fraction: float = Field(0.5, ge=0, le=1, description="Share of lesion-centred patches")

    @model_validator(mode="after")
    def resolve_boundaries(self):
        total = self.total_epochs
        if self.phase1_end is None:
            self.phase1_end = int(round(0.4 * total))
        if self.phase2_end is None:
            self.phase2_end = int(round(0.8 * total))
        if self.warmup_epochs is None:
            self.warmup_epochs = int(round(0.05 * total))
        if self.ramp_epochs is None:
            self.ramp_epochs = max(1, int(round(0.1 * total)))

        e1, e2 = self.phase1_end, self.phase2_end
        if e1 + self.warmup_epochs + self.ramp_epochs > e2:
            raise ValueError(
                f"phase1_end + warmup + ramp = {e1 + self.warmup_epochs + self.ramp_epochs} "
                f"exceeds phase2_end = {e2}"
            )
        if e2 >= total:
            raise ValueError(f"phase2_end {e2} must be below total_epochs {total}")
        return self


def phase_at(epoch: int, cfg: ScheduleConfig) -> PhaseState:
    """
    Map an epoch to its curriculum state.

    During Phase 2 the effective weights are
    ``target * clamp((epoch - e1 - w) / r, 0, 1)``. Without the refiner Phase 2
    lasts until the end of training.

    Raises:
        ScheduleError: If epoch is outside ``[0, total_epochs)``
    """
    if not 0 <= epoch < cfg.total_epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {cfg.total_epochs})")

    if not cfg.scheduled:
        return PhaseState(
            phase=Phase.UNSCHEDULED,
            epoch=epoch,
            lambda_align=cfg.lambda_align,
            lambda_heat=cfg.lambda_heat,
            refiner_enabled=cfg.use_refiner,
        )

    e1, e2 = cfg.phase1_end, cfg.phase2_end
    if epoch < e1:
        return PhaseState(
            phase=Phase.SEG_ONLY, epoch=epoch, lambda_align=0.0, lambda_heat=0.0,
            refiner_enabled=False,
        )
    if epoch < e2 or not cfg.use_refiner:
        ramp = min(max((epoch - e1 - cfg.warmup_epochs) / cfg.ramp_epochs, 0.0), 1.0)
        return PhaseState(
            phase=Phase.SEMANTIC_TRANSFER,
            epoch=epoch,
            lambda_align=cfg.lambda_align * ramp,
            lambda_heat=cfg.lambda_heat * ramp,
            refiner_enabled=False,
        )
    return PhaseState(
        phase=Phase.AUX_OFF_REFINE, epoch=epoch, lambda_align=0.0, lambda_heat=0.0,
        refiner_enabled=True,
    )


def schedule_table(cfg: ScheduleConfig) -> list[PhaseState]:
    return [phase_at(epoch, cfg) for epoch in range(cfg.total_epochs)]


def poly_lr(epoch: int, total_epochs: int, initial_lr: float, exponent: float = 0.9) -> float:
    """Polynomial decay ``initial_lr * (1 - epoch / total_epochs) ** exponent``."""
    return initial_lr * (1 - epoch / total_epochs) ** exponent


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class SGD:
    """SGD with (Nesterov) momentum and L2 weight decay over named parameters."""

    def __init__(
        self,
        named_params,
        momentum: float = 0.99,
        nesterov: bool = True,
        weight_decay: float = 0.0,
    ):
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.add_params(named_params)

    def add_params(self, named_params) -> None:
        for name, param in named_params:
            if name in self.params:
                raise KeyError(f"parameter {name} already registered")
            self.params[name] = param

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.grad = None

    def step(self, lr: float) -> None:
        for name, param in self.params.items():
            if param.grad is None:
                continue
            grad = param.grad
            if self.weight_decay:
                grad = grad + self.weight_decay * param.data
            if self.momentum:
                buf = self.buffers.get(name)
                buf = grad.copy() if buf is None else self.momentum * buf + grad
                self.buffers[name] = buf
                grad = grad + self.momentum * buf if self.nesterov else buf
            param.data = (param.data - lr * grad).astype(param.dtype, copy=False)


class PatchSampler:
    """
    Draw training patches, lesion-centred with probability ``lesion_fraction``.

    A lesion-centred patch is placed around a randomly chosen foreground voxel
    and shifted back inside the volume where needed; other patches start at a
    uniform position. Cases without foreground always get a uniform patch.
    """

    def __init__(
        self,
        cases: list[tuple[Volume, LesionMask]],
        patch_extents: tuple[int, int, int],
        lesion_fraction: float = 0.5,
        seed: int = 0,
    ):
        if not cases:
            raise ValueError("cannot sample from an empty dataset")
        self.patch = tuple(int(n) for n in patch_extents)
        for volume, _ in cases:
            if any(n < p for n, p in zip(volume.extents, self.patch, strict=True)):
                raise ShapeError(
                    f"case {volume.case_id} extents {volume.extents} smaller than patch {self.patch}"
                )
        self.cases = cases
        self.lesion_fraction = lesion_fraction
        self.rng = np.random.default_rng(seed)
        self._foreground = [np.argwhere(mask.data > 0) for _, mask in cases]

    def _start(self, index: int) -> tuple[int, int, int]:
        volume, _ = self.cases[index]
        limits = [n - p for n, p in zip(volume.extents, self.patch, strict=True)]
        foreground = self._foreground[index]
        if len(foreground) and self.rng.random() < self.lesion_fraction:
            center = foreground[self.rng.integers(len(foreground))]
            return tuple(
                int(min(max(c - p // 2, 0), lim))
                for c, p, lim in zip(center, self.patch, limits, strict=True)
            )
        return tuple(int(self.rng.integers(lim + 1)) for lim in limits)

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        """One patch as ``([M, D, H, W], [1, D, H, W])``."""
        index = int(self.rng.integers(len(self.cases)))
        volume, mask = self.cases[index]
        z, y, x = self._start(index)
        d, h, w = self.patch
        window = (slice(z, z + d), slice(y, y + h), slice(x, x + w))
        return volume.data[(slice(None),) + window], mask.data[window][None]

    def sample_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        patches = [self.sample() for _ in range(batch_size)]
        return np.stack([p[0] for p in patches]), np.stack([p[1] for p in patches])
