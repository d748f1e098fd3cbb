"""
Text-guided segmenter: backbone, similarity head, text embedding and refiner.
"""

import logging

from pydantic import BaseModel, ConfigDict

from lesionseg.autodiff import Tensor
from lesionseg.backbone import BackboneConfig, MultiEncoderUNet
from lesionseg.guidance import GuidanceConfig, Heatmap, SimilarityHead, TextEmbedding
from lesionseg.nn import Module
from lesionseg.refiner import CrossAttentionRefiner, RefineOutput, RefinerConfig

logger = logging.getLogger(__name__)


class ModelOutput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    y_base: Tensor
    y: Tensor
    heatmap: Heatmap
    features: Tensor
    refine: RefineOutput | None = None

    @property
    def s(self) -> Tensor:
        return self.heatmap.s


class TextGuidedSegmenter(Module):
    """
    Multi-encoder U-Net with a bottleneck similarity head and an optional refiner.

    Parameter names are prefixed ``backbone/``, ``similarity/`` and, once
    attached, ``refiner/``.
    """

    def __init__(
        self,
        backbone_cfg: BackboneConfig,
        guidance_cfg: GuidanceConfig | None = None,
        embedding: TextEmbedding | None = None,
        seed: int = 0,
    ):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.guidance_cfg = guidance_cfg or GuidanceConfig()
        self.embedding = embedding or self.guidance_cfg.resolve_embedding(backbone_cfg.text_dim)
        self.seed = seed
        self.backbone = MultiEncoderUNet(backbone_cfg, seed=seed)
        self.similarity = SimilarityHead(
            backbone_cfg.bottleneck_channels, backbone_cfg.text_dim, seed=seed + 1
        )
        self.refiner: CrossAttentionRefiner | None = None

    @property
    def has_refiner(self) -> bool:
        return self.refiner is not None

    def attach_refiner(self, cfg: RefinerConfig, seed: int | None = None) -> CrossAttentionRefiner:
        """Instantiate the refiner on the top decoder features; idempotent."""
        if self.refiner is None:
            self.refiner = CrossAttentionRefiner(
                self.backbone_cfg.channels(0),
                self.backbone_cfg.text_dim,
                cfg,
                seed=self.seed + 2 if seed is None else seed,
            )
            logger.info(
                f"Attached refiner: hidden={cfg.hidden}, heads={cfg.heads}, "
                f"tokens={cfg.num_text_tokens}, gamma={cfg.gate_init}"
            )
        return self.refiner

    def forward(self, volume, use_refiner: bool | None = None) -> ModelOutput:
        """
        Args:
            volume: ``[B, M, D, H, W]`` batch
            use_refiner: Apply the refiner; defaults to whether one is attached

        Returns:
            ModelOutput with base logits, final logits, heatmap and top features
        """
        if use_refiner is None:
            use_refiner = self.has_refiner
        if use_refiner and self.refiner is None:
            raise RuntimeError("refiner requested but not attached")

        skips, f = self.backbone.encode(volume)
        F, y_base = self.backbone.decode(skips, f)
        heatmap = self.similarity(f, self.embedding, self.guidance_cfg.temperature)

        refine = None
        y = y_base
        if use_refiner:
            refine = self.refiner(F, y_base, self.backbone.head, self.embedding)
            y = refine.y
        return ModelOutput(y_base=y_base, y=y, heatmap=heatmap, features=F, refine=refine)
