"""
Bottleneck text-image similarity head.

The image branch projects the fused bottleneck features into the text space,
normalises them per voxel and scores them against the unit text embedding;
the temperature-scaled cosine goes through a sigmoid to give the heatmap s.
"""

import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from lesionseg.autodiff import Tensor, get_default_dtype
from lesionseg.errors import CaseFormatError, ShapeError
from lesionseg.nn import Conv3d, Module
from lesionseg.ops import L2_EPS, l2_normalize, resize_trilinear

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = "textemb"
EMBEDDING_VERSION = "v1"


class TextEmbedding(BaseModel):
    """Stand-in for the frozen text-encoder output of the lesion prompt."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    vector: np.ndarray = Field(..., description="Raw embedding t, shape (d,)")
    source: Literal["pseudo", "file"] = Field("pseudo", description="Where t came from")
    seed: int | None = Field(None, description="Seed of a pseudo embedding")
    path: str | None = Field(None, description="File of a loaded embedding")

    @field_validator("vector")
    @classmethod
    def validate_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError(f"text embedding must be a non-empty vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("text embedding contains non-finite values")
        return v

    @property
    def dim(self) -> int:
        return int(self.vector.size)

    @property
    def unit(self) -> np.ndarray:
        """t normalised to unit length (divided by max(norm, 1e-12))."""
        return self.vector / max(float(np.linalg.norm(self.vector)), L2_EPS)


def pseudo_embedding(dim: int, seed: int) -> TextEmbedding:
    """Seeded standard-normal embedding, normalised to unit length."""
    if dim < 1:
        raise ShapeError(f"embedding dimension must be >= 1, got {dim}")
    raw = np.random.default_rng(seed).standard_normal(dim)
    return TextEmbedding(vector=raw / np.linalg.norm(raw), source="pseudo", seed=seed)


def load_embedding(path: str | Path) -> TextEmbedding:
    """
    Read an embedding file and normalise it.

    The file has two lines: ``textemb v1 d=<int>`` and ``d`` whitespace
    separated decimal reals.

    Raises:
        CaseFormatError: On a bad header, a count mismatch or unparsable values
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CaseFormatError("header", f"{path} is empty")
    header = lines[0].split()
    if len(header) != 3 or header[0] != EMBEDDING_MAGIC:
        raise CaseFormatError("header", f"expected '{EMBEDDING_MAGIC} v1 d=<int>', got {lines[0]!r}")
    if header[1] != EMBEDDING_VERSION:
        raise CaseFormatError("version", f"unsupported embedding version {header[1]!r}")
    if not header[2].startswith("d="):
        raise CaseFormatError("d", f"expected d=<int>, got {header[2]!r}")
    try:
        dim = int(header[2][2:])
    except ValueError as e:
        raise CaseFormatError("d", f"not an integer: {header[2][2:]!r}") from e

    try:
        values = [float(v) for v in " ".join(lines[1:]).split()]
    except ValueError as e:
        raise CaseFormatError("values", str(e)) from e
    if len(values) != dim:
        raise CaseFormatError("values", f"header declares d={dim}, found {len(values)} values")

    vector = np.array(values, dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm <= L2_EPS:
        raise CaseFormatError("values", "embedding has zero norm")
    logger.info(f"Loaded {dim}-dimensional text embedding from {path}")
    return TextEmbedding(vector=vector / norm, source="file", path=str(path))


def save_embedding(embedding: TextEmbedding, path: str | Path) -> Path:
    path = Path(path)
    values = " ".join(repr(float(v)) for v in embedding.vector)
    path.write_text(
        f"{EMBEDDING_MAGIC} {EMBEDDING_VERSION} d={embedding.dim}\n{values}\n", encoding="utf-8"
    )
    return path


class GuidanceConfig(BaseModel):
    temperature: float = Field(1.0, gt=0, description="Similarity temperature T")
    embedding_path: str | None = Field(None, description="Embedding file; pseudo embedding if unset")
    embedding_seed: int = Field(0, description="Seed of the pseudo embedding")

    def resolve_embedding(self, dim: int) -> TextEmbedding:
        if self.embedding_path:
            embedding = load_embedding(self.embedding_path)
            if embedding.dim != dim:
                raise ShapeError(
                    f"embedding file has d={embedding.dim}, backbone expects text_dim={dim}"
                )
            return embedding
        return pseudo_embedding(dim, self.embedding_seed)


class Heatmap(BaseModel):
    """Bottleneck-resolution lesion likelihood s with the temperature it was made at."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    s: Tensor
    temperature: float = Field(..., gt=0)

    @property
    def bounds(self) -> tuple[float, float]:
        """Attainable range [sigmoid(-1/T), sigmoid(1/T)]."""
        return float(1 / (1 + np.exp(1 / self.temperature))), float(
            1 / (1 + np.exp(-1 / self.temperature))
        )


def similarity_head(
    projected: Tensor, embedding: TextEmbedding | np.ndarray | Tensor, temperature: float = 1.0
) -> Tensor:
    """
    Score projected features against the text embedding.

    Args:
        projected: ``proj(f)`` of shape ``[B, d, Db, Hb, Wb]``
        embedding: Text embedding t (normalised here)
        temperature: T > 0

    Returns:
        s of shape ``[B, 1, Db, Hb, Wb]``
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if isinstance(embedding, TextEmbedding):
        t = embedding.unit
    elif isinstance(embedding, Tensor):
        t = embedding.data / max(float(np.linalg.norm(embedding.data)), L2_EPS)
    else:
        t = np.asarray(embedding, dtype=np.float64)
        t = t / max(float(np.linalg.norm(t)), L2_EPS)
    if projected.ndim != 5 or projected.shape[1] != t.size:
        raise ShapeError(
            f"projected features {projected.shape} do not match text dimension d={t.size}"
        )
    t = Tensor(t.astype(projected.dtype).reshape(1, -1, 1, 1, 1))
    cosine = (l2_normalize(projected, axis=1) * t).sum(axis=1, keepdims=True)
    return (cosine / temperature).sigmoid()


class SimilarityHead(Module):
    """Bias-free 1x1x1 projection W_f from C bottleneck channels to the text dimension d."""

    def __init__(self, channels: int, text_dim: int, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.proj = Conv3d(channels, text_dim, 1, bias=False, rng=rng)
        self.text_dim = text_dim

    def forward(self, f: Tensor, embedding: TextEmbedding, temperature: float = 1.0) -> Heatmap:
        if embedding.dim != self.text_dim:
            raise ShapeError(
                f"text embedding has d={embedding.dim}, projection outputs {self.text_dim}"
            )
        s = similarity_head(self.proj(f), embedding, temperature)
        return Heatmap(s=s, temperature=temperature)


def upsample_heatmap(s: Heatmap | Tensor, target) -> Tensor:
    """Trilinear upsampling of s to the segmentation resolution."""
    values = s.s if isinstance(s, Heatmap) else s
    if not isinstance(values, Tensor):
        values = Tensor(np.asarray(values, dtype=get_default_dtype()))
    return resize_trilinear(values, target)
