"""
Segmentation, alignment and heatmap losses and their phase-weighted sum.
"""

import logging

import numpy as np
from pydantic import BaseModel, Field

from lesionseg.autodiff import Tensor
from lesionseg.errors import ShapeError
from lesionseg.ops import bce_with_logits

logger = logging.getLogger(__name__)

ALIGN_EPS = 1e-6
HEAT_CLAMP = 1e-6
SEG_SMOOTH = 1e-5


class LossBreakdown(BaseModel):
    """Scalar values of one composite-loss evaluation."""

    seg: float = Field(..., description="Segmentation loss")
    align: float
    heat: float = Field(..., description="Heatmap loss")
    lambda_align: float = Field(..., ge=0)
    lambda_heat: float = Field(..., ge=0)
    total: float

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite([self.seg, self.align, self.heat, self.total])))


def downsample_mask(mask: np.ndarray, target) -> np.ndarray:
    """
    Block max-pool a binary mask to ``target`` spatial extents.

    Works on ``[D,H,W]`` masks and on batched ``[..., D,H,W]`` masks. An output
    voxel is 1 iff any voxel of its block is 1.

    Raises:
        ShapeError: If a target extent does not divide the source extent
    """
    mask = np.asarray(mask)
    target = tuple(int(n) for n in target)
    source = mask.shape[-3:]
    if len(target) != 3 or any(t < 1 or s % t for s, t in zip(source, target, strict=True)):
        raise ShapeError(f"cannot block-reduce mask extents {source} to {target}")
    lead = mask.shape[:-3]
    blocks = tuple(s // t for s, t in zip(source, target, strict=True))
    shaped = mask.reshape(
        lead + (target[0], blocks[0], target[1], blocks[1], target[2], blocks[2])
    )
    n = len(lead)
    return (shaped.max(axis=(n + 1, n + 3, n + 5)) > 0).astype(mask.dtype)


def _as_target(mask, like: Tensor) -> Tensor:
    values = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if values.shape != like.shape:
        raise ShapeError(f"mask shape {values.shape} does not match prediction {like.shape}")
    return Tensor(values.astype(like.dtype))


def align_loss(s: Tensor, mask, eps: float = ALIGN_EPS) -> Tensor:
    """``1 - sum(s * M) / (sum(M) + eps)`` over the whole batch."""
    m = _as_target(mask, s)
    return 1.0 - (s * m).sum() / (float(m.data.sum()) + eps)


def heat_loss(s: Tensor, mask) -> Tensor:
    """Voxel-mean binary cross-entropy of s against M, s clamped to [1e-6, 1-1e-6]."""
    m = _as_target(mask, s)
    clamped = s.clamp(HEAT_CLAMP, 1.0 - HEAT_CLAMP)
    per_voxel = -(m * clamped.log() + (1.0 - m) * (1.0 - clamped).log())
    return per_voxel.mean()


def soft_dice_loss(logits: Tensor, mask, smooth: float = SEG_SMOOTH) -> Tensor:
    m = _as_target(mask, logits)
    p = logits.sigmoid()
    intersection = (p * m).sum()
    return 1.0 - (2.0 * intersection + smooth) / (p.sum() + float(m.data.sum()) + smooth)


def seg_loss(logits: Tensor, mask) -> Tensor:
    """Equal-weighted soft Dice and BCE-with-logits over the batch."""
    m = _as_target(mask, logits)
    return 0.5 * soft_dice_loss(logits, m) + 0.5 * bce_with_logits(logits, m).mean()


def composite(
    seg: Tensor,
    align: Tensor | None,
    heat: Tensor | None,
    lambda_align: float,
    lambda_heat: float,
) -> tuple[Tensor, LossBreakdown]:
    """
    Weighted sum ``seg + lambda_align * align + lambda_heat * heat``.

    A term whose weight is zero is left out of the graph entirely, so it sends
    no gradient to the similarity head.

    Returns:
        (total, breakdown)
    """
    total = seg
    if lambda_align > 0:
        if align is None:
            raise ValueError("lambda_align > 0 but no alignment loss supplied")
        total = total + lambda_align * align
    if lambda_heat > 0:
        if heat is None:
            raise ValueError("lambda_heat > 0 but no heatmap loss supplied")
        total = total + lambda_heat * heat

    align_value = float(align.item()) if align is not None else 0.0
    heat_value = float(heat.item()) if heat is not None else 0.0
    breakdown = LossBreakdown(
        seg=float(seg.item()),
        align=align_value,
        heat=heat_value,
        lambda_align=lambda_align,
        lambda_heat=lambda_heat,
        total=float(total.item()),
    )
    return total, breakdown
