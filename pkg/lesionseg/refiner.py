"""
Gated cross-attention refiner on the top decoder features.

Image tokens of F query key/value tokens expanded from the text embedding.
The attended correction Δ enters through ``F + tanh(γ)·Δ``, goes through the
shared segmentation head and is blended into the base logits only where the
base prediction is already confident.
"""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lesionseg.autodiff import Tensor
from lesionseg.errors import ShapeError
from lesionseg.guidance import TextEmbedding
from lesionseg.nn import Linear, Module, Parameter
from lesionseg.ops import softmax

logger = logging.getLogger(__name__)


class RefinerConfig(BaseModel):
    hidden: int = Field(32, ge=1, description="Attention width d_h")
    heads: int = Field(4, ge=1, description="Number of attention heads h")
    num_text_tokens: int = Field(1, ge=1, description="Key/value tokens m expanded from t")
    gate_init: float = Field(0.0, description="Initial gate parameter gamma")
    alpha: float = Field(0.25, ge=0.0, le=1.0, description="Blend strength")
    tau: float = Field(0.35, gt=0.0, lt=1.0, description="Confidence threshold on sigmoid(y_base)")

    @model_validator(mode="after")
    def validate_heads(self):
        if self.hidden % self.heads:
            raise ValueError(
                f"hidden width {self.hidden} is not divisible by {self.heads} heads"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


class RefineOutput(BaseModel):
    """Refined logits, blended logits and the confidence mask used for blending."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    y_ref: Tensor
    y: Tensor
    m_conf: np.ndarray = Field(..., description="Binary mask, 1 where sigmoid(y_base) > tau")
    delta_norm: float = Field(..., description="RMS of the gated correction tanh(gamma)*delta")


def gated_residual(F: Tensor, delta: Tensor, gamma: Tensor | float) -> Tensor:
    """``F + tanh(gamma) * delta``."""
    if F.shape != delta.shape:
        raise ShapeError(f"residual shapes differ: {F.shape} vs {delta.shape}")
    gate = gamma.tanh() if isinstance(gamma, Tensor) else float(np.tanh(gamma))
    return F + gate * delta


def confidence_mask(y_base: Tensor | np.ndarray, tau: float) -> np.ndarray:
    """Indicator ``sigmoid(y_base) > tau``, computed on values outside the graph."""
    logits = y_base.data if isinstance(y_base, Tensor) else np.asarray(y_base)
    p = np.where(
        logits >= 0,
        1.0 / (1.0 + np.exp(-np.abs(logits))),
        np.exp(-np.abs(logits)) / (1.0 + np.exp(-np.abs(logits))),
    )
    return (p > tau).astype(logits.dtype)


def confidence_blend(
    y_base: Tensor, y_ref: Tensor, tau: float, alpha: float
) -> tuple[Tensor, np.ndarray]:
    """
    Blend refined logits into base logits inside the confident region.

    ``y = y_base + alpha * (y_ref - y_base) * M_conf``. The mask is treated as
    data, so no gradient reaches y_base through it.

    Returns:
        (y, M_conf)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if y_base.shape != y_ref.shape:
        raise ShapeError(f"logit shapes differ: {y_base.shape} vs {y_ref.shape}")
    m_conf = confidence_mask(y_base, tau)
    y = y_base + alpha * (y_ref - y_base) * Tensor(m_conf)
    return y, m_conf


class CrossAttentionRefiner(Module):
    """Multi-head cross-attention from image tokens to text tokens with a tanh gate."""

    def __init__(self, channels: int, text_dim: int, cfg: RefinerConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.channels, self.text_dim = channels, text_dim
        m, d_h = cfg.num_text_tokens, cfg.hidden
        self.query = Linear(channels, d_h, bias=False, rng=rng)
        self.key = Linear(text_dim, m * d_h, rng=rng)
        self.value = Linear(text_dim, m * d_h, rng=rng)
        self.out = Linear(d_h, channels, rng=rng)
        self.gamma = Parameter(np.full(1, cfg.gate_init))

    @property
    def gate(self) -> float:
        return float(np.tanh(self.gamma.data[0]))

    def _text_tokens(self, proj: Linear, t: Tensor) -> Tensor:
        cfg = self.cfg
        tokens = proj(t).reshape(1, cfg.num_text_tokens, cfg.heads, cfg.head_dim)
        return tokens.permute(0, 2, 1, 3)

    def attend(self, F: Tensor, embedding: TextEmbedding) -> tuple[Tensor, Tensor]:
        """
        Compute the correction Δ for the top-level features.

        Args:
            F: ``[B, C, D, H, W]`` top decoder features
            embedding: Text embedding (normalised before projection)

        Returns:
            (delta, context): Δ on F's grid and the pre-projection attended
            values ``[B, T, d_h]``
        """
        if F.ndim != 5 or F.shape[1] != self.channels:
            raise ShapeError(f"refiner expects [B,{self.channels},D,H,W], got {F.shape}")
        if embedding.dim != self.text_dim:
            raise ShapeError(f"text embedding has d={embedding.dim}, refiner expects {self.text_dim}")
        cfg = self.cfg
        B, C, D, H, W = F.shape
        T = D * H * W

        tokens = F.permute(0, 2, 3, 4, 1).reshape(B, T, C)
        q = self.query(tokens).reshape(B, T, cfg.heads, cfg.head_dim).permute(0, 2, 1, 3)
        t = Tensor(embedding.unit.astype(F.dtype).reshape(1, -1))
        k = self._text_tokens(self.key, t)
        v = self._text_tokens(self.value, t)

        scores = (q @ k.transpose()) / float(np.sqrt(cfg.head_dim))
        weights = softmax(scores, axis=-1)
        context = (weights @ v).permute(0, 2, 1, 3).reshape(B, T, cfg.hidden)
        delta = self.out(context).reshape(B, D, H, W, C).permute(0, 4, 1, 2, 3)
        return delta, context

    def forward(
        self, F: Tensor, y_base: Tensor, head: Module, embedding: TextEmbedding
    ) -> RefineOutput:
        delta, _ = self.attend(F, embedding)
        y_ref = head(gated_residual(F, delta, self.gamma))
        y, m_conf = confidence_blend(y_base, y_ref, self.cfg.tau, self.cfg.alpha)
        delta_norm = abs(self.gate) * float(np.sqrt(np.mean(delta.data**2)))
        logger.debug(
            f"Refiner gate {self.gate:.4f}, correction RMS {delta_norm:.3e}, "
            f"{int(m_conf.sum())} confident voxels"
        )
        return RefineOutput(y_ref=y_ref, y=y, m_conf=m_conf, delta_norm=delta_norm)


def cross_attend(
    F: Tensor, embedding: TextEmbedding, refiner: CrossAttentionRefiner
) -> Tensor:
    """Ungated correction of ``F``; the refiner carries the weights built from its RefinerConfig."""
    return refiner.attend(F, embedding)[0]
