"""
Multi-encoder 3D U-Net.

One encoder tower per modality (shared architecture, independent weights),
fusion of the modality bottlenecks by channel concatenation and a 1x1x1
projection, and one decoder that fuses the skips of every tower at each level.
"""

import logging
from collections.abc import Collection

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from lesionseg.autodiff import Tensor, get_default_dtype
from lesionseg.errors import ShapeError
from lesionseg.nn import ConvBlock, Conv3d, Module, ModuleList
from lesionseg.ops import concat, resize_trilinear

logger = logging.getLogger(__name__)


class BackboneConfig(BaseModel):
    """Topology of the multi-encoder U-Net."""

    modalities: int = Field(3, ge=1, description="Number of input modalities / encoder towers")
    levels: int = Field(3, ge=1, description="Resolution levels, bottleneck included")
    base_channels: int = Field(8, ge=1, description="Channels at the top level")
    input_extents: tuple[int, int, int] = Field(
        (16, 32, 32), description="Patch extents D x H x W"
    )
    text_dim: int = Field(32, ge=1, description="Text embedding dimension d")
    use_bias: bool = Field(True, description="Give convolutions a (zero-initialised) bias")

    @field_validator("input_extents")
    @classmethod
    def validate_extents(cls, v):
        if any(n < 1 for n in v):
            raise ValueError(f"input extents must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def validate_divisibility(self):
        factor = 2 ** (self.levels - 1)
        if any(n % factor for n in self.input_extents):
            raise ValueError(
                f"input extents {self.input_extents} must be divisible by 2^(levels-1) = {factor}"
            )
        return self

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.levels - 1)

    def extents_at(self, level: int) -> tuple[int, int, int]:
        factor = 2**level
        return tuple(n // factor for n in self.input_extents)  # type: ignore[return-value]

    @property
    def bottleneck_extents(self) -> tuple[int, int, int]:
        return self.extents_at(self.levels - 1)


class EncoderTower(Module):
    """Single-modality encoder; level 0 keeps resolution, later levels halve it."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        blocks = [ConvBlock(1, cfg.channels(0), stride=1, bias=cfg.use_bias, rng=rng)]
        for level in range(1, cfg.levels):
            blocks.append(
                ConvBlock(
                    cfg.channels(level - 1),
                    cfg.channels(level),
                    stride=2,
                    bias=cfg.use_bias,
                    rng=rng,
                )
            )
        self.blocks = ModuleList(blocks)

    def forward(self, x: Tensor) -> list[Tensor]:
        features = []
        for block in self.blocks:
            x = block(x)
            features.append(x)
        return features


class DecoderStage(Module):
    """Upsample, fuse the stream with every tower's skip, then refine with a ConvBlock."""

    def __init__(self, cfg: BackboneConfig, level: int, rng: np.random.Generator):
        super().__init__()
        c_in, c_out = cfg.channels(level + 1), cfg.channels(level)
        self.up = Conv3d(c_in, c_out, 3, bias=cfg.use_bias, rng=rng)
        self.skip_proj = Conv3d(
            (cfg.modalities + 1) * c_out, c_out, 1, bias=cfg.use_bias, rng=rng
        )
        self.block = ConvBlock(c_out, c_out, bias=cfg.use_bias, rng=rng)

    def forward(self, x: Tensor, skips: list[Tensor]) -> Tensor:
        x = self.up(resize_trilinear(x, skips[0].shape[2:]))
        x = self.skip_proj(concat([x, *skips], axis=1))
        return self.block(x)


class MultiEncoderUNet(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoders = ModuleList([EncoderTower(cfg, rng) for _ in range(cfg.modalities)])
        self.fuse = Conv3d(
            cfg.modalities * cfg.bottleneck_channels,
            cfg.bottleneck_channels,
            1,
            bias=cfg.use_bias,
            rng=rng,
        )
        self.decoder = ModuleList(
            [DecoderStage(cfg, level, rng) for level in range(cfg.levels - 1)]
        )
        self.head = Conv3d(cfg.channels(0), 1, 1, bias=True, rng=rng)

    def _as_input(self, volume) -> Tensor:
        x = volume if isinstance(volume, Tensor) else Tensor(
            np.asarray(volume, dtype=get_default_dtype())
        )
        if x.ndim != 5:
            raise ShapeError(f"expected a [B,M,D,H,W] batch, got shape {x.shape}")
        if x.shape[1] != self.cfg.modalities:
            raise ShapeError(
                f"batch has {x.shape[1]} modalities, model expects {self.cfg.modalities}"
            )
        if tuple(x.shape[2:]) != tuple(self.cfg.input_extents):
            raise ShapeError(
                f"batch extents {x.shape[2:]} do not match configured {self.cfg.input_extents}"
            )
        return x

    def encode(
        self, volume, detach_modalities: Collection[int] = ()
    ) -> tuple[list[list[Tensor]], Tensor]:
        """
        Run every modality through its own tower and fuse the bottlenecks.

        Args:
            volume: ``[B, M, D, H, W]`` array or Tensor
            detach_modalities: Tower indices whose outputs are cut from the graph

        Returns:
            (skips, f) where ``skips[m][level]`` are the pre-bottleneck features
            of tower ``m`` and ``f`` is the fused bottleneck ``[B, C, Db, Hb, Wb]``
        """
        x = self._as_input(volume)
        skips: list[list[Tensor]] = []
        bottlenecks: list[Tensor] = []
        for m, tower in enumerate(self.encoders):
            features = tower(x[:, m : m + 1])
            if m in detach_modalities:
                features = [feat.detach() for feat in features]
            skips.append(features[:-1])
            bottlenecks.append(features[-1])
        f = self.fuse(concat(bottlenecks, axis=1))
        return skips, f

    def decode(self, skips: list[list[Tensor]], f: Tensor) -> tuple[Tensor, Tensor]:
        """
        Decode the fused bottleneck back to full resolution.

        Returns:
            (F, y_base): top-level features ``[B, C0, D, H, W]`` and base logits
            ``[B, 1, D, H, W]``
        """
        if any(len(s) != self.cfg.levels - 1 for s in skips):
            raise ShapeError("skip pyramid does not match the configured number of levels")
        x = f
        for level in reversed(range(self.cfg.levels - 1)):
            x = self.decoder[level](x, [tower_skips[level] for tower_skips in skips])
        return x, self.head(x)

    def forward(self, volume) -> tuple[Tensor, Tensor, Tensor]:
        skips, f = self.encode(volume)
        F, y_base = self.decode(skips, f)
        return f, F, y_base


def count_parameters(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))
