"""
Synthetic multi-modal phantoms with ellipsoidal lesions.

Each case has three co-registered channels standing in for T2W, ADC and DWI.
The background is smoothed seeded noise; lesions are ellipsoids whose contrast
sign is fixed per modality (hypo-intense on t2w/adc, hyper-intense on dwi);
every channel is then standardised to zero mean and unit variance.
"""

import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import ndimage

from lesionseg.errors import ShapeError

logger = logging.getLogger(__name__)

MODALITIES = ("t2w", "adc", "dwi")
MAX_PLACEMENT_ATTEMPTS = 200
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


class Ellipsoid(BaseModel):
    center: tuple[float, float, float] = Field(..., description="Center in voxel coordinates")
    radii: tuple[float, float, float] = Field(..., description="Semi-axes in voxels")

    def rasterize(self, extents: tuple[int, int, int]) -> np.ndarray:
        """Voxels whose centers satisfy ``sum(((i - c) / r) ** 2) <= 1``."""
        grids = np.ogrid[tuple(slice(0, n) for n in extents)]
        inside = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.radii))
        return inside <= 1.0


class CaseSpec(BaseModel):
    """Parameters of one synthetic case."""

    seed: int = Field(0, description="Generator seed")
    extents: tuple[int, int, int] = Field((16, 32, 32), description="Grid extents D x H x W")
    spacing: tuple[float, float, float] = Field((3.0, 0.5, 0.5), description="Voxel size in mm")
    lesion_count: tuple[int, int] = Field((1, 2), description="Inclusive lesion count range")
    lesion_radius_mm: tuple[float, float] = Field((3.0, 6.0), description="Semi-axis range in mm")
    contrast_sign: tuple[int, ...] = Field((-1, -1, 1), description="Lesion contrast sign per modality")
    contrast_magnitude: tuple[float, ...] = Field(
        (1.0, 1.5, 2.0), description="Lesion contrast per modality, in background std units"
    )
    noise_level: float = Field(0.3, ge=0, description="Additive white noise std")
    texture_scale: float = Field(2.0, gt=0, description="Background smoothing sigma in voxels")
    texture_amplitude: float = Field(0.5, ge=0, description="Background texture std")

    @field_validator("extents")
    @classmethod
    def validate_extents(cls, v):
        if any(n < 1 for n in v):
            raise ValueError(f"extents must be positive, got {v}")
        return v

    @field_validator("spacing")
    @classmethod
    def validate_spacing(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"spacing must be positive, got {v}")
        return v

    @field_validator("contrast_sign")
    @classmethod
    def validate_signs(cls, v):
        if any(s not in (-1, 1) for s in v):
            raise ValueError(f"contrast signs must be -1 or +1, got {v}")
        return v

    @model_validator(mode="after")
    def validate_ranges(self):
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid lesion count range {self.lesion_count}")
        r_lo, r_hi = self.lesion_radius_mm
        if r_lo <= 0 or r_hi < r_lo:
            raise ValueError(f"invalid lesion radius range {self.lesion_radius_mm}")
        if r_lo / max(self.spacing) < 1.0:
            raise ValueError(
                f"minimum radius {r_lo} mm is below one voxel along spacing {self.spacing}"
            )
        if len(self.contrast_sign) != len(MODALITIES) or len(self.contrast_magnitude) != len(
            MODALITIES
        ):
            raise ValueError(f"contrast settings need one entry per modality {MODALITIES}")
        return self


class Volume(BaseModel):
    """Multi-modal intensity grid ``[M, D, H, W]`` with its physical spacing."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    case_id: str
    modalities: tuple[str, ...] = MODALITIES
    data: np.ndarray
    spacing: tuple[float, float, float]

    @model_validator(mode="after")
    def validate_grid(self):
        if self.data.ndim != 4 or self.data.shape[0] != len(self.modalities):
            raise ValueError(
                f"volume data {self.data.shape} does not hold {len(self.modalities)} modalities"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"volume {self.case_id} contains non-finite intensities")
        return self

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])  # type: ignore[return-value]


class LesionMask(BaseModel):
    """Binary ground truth co-registered with a Volume."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    lesion_count: int = Field(..., ge=0, description="6-connected foreground components")
    lesions: list[Ellipsoid] = Field(default_factory=list, description="Generation only; not stored on disk")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]


def count_components(mask: np.ndarray) -> int:
    _, count = ndimage.label(mask > 0, structure=FACE_CONNECTIVITY)
    return int(count)


def _place_lesions(
    spec: CaseSpec, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, list[Ellipsoid]]:
    largest = [spec.lesion_radius_mm[1] / s for s in spec.spacing]
    if count and any(2 * r + 1 > n for r, n in zip(largest, spec.extents, strict=True)):
        raise ShapeError(
            f"lesions with semi-axes up to {np.round(largest, 2).tolist()} voxels cannot fit in "
            f"extents {spec.extents}"
        )
    occupied = np.zeros(spec.extents, dtype=bool)
    lesions: list[Ellipsoid] = []
    for index in range(count):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            radii_mm = rng.uniform(*spec.lesion_radius_mm, size=3)
            radii = tuple(float(r / s) for r, s in zip(radii_mm, spec.spacing, strict=True))
            center = tuple(
                float(rng.uniform(r, n - 1 - r))
                for r, n in zip(radii, spec.extents, strict=True)
            )
            lesion = Ellipsoid(center=center, radii=radii)
            region = lesion.rasterize(spec.extents)
            # keep lesions apart so each stays its own component
            halo = ndimage.binary_dilation(region, structure=FACE_CONNECTIVITY)
            if region.any() and not (halo & occupied).any():
                occupied |= region
                lesions.append(lesion)
                break
        else:
            raise ShapeError(
                f"could not place lesion {index + 1} of {count} in extents {spec.extents}"
            )
    return occupied, lesions


def _standardize(channel: np.ndarray) -> np.ndarray:
    std = channel.std()
    return (channel - channel.mean()) / (std if std > 0 else 1.0)


def generate_case(spec: CaseSpec, case_id: str = "case") -> tuple[Volume, LesionMask]:
    """
    Generate one phantom case.

    Args:
        spec: Case parameters (the seed fixes every random draw)
        case_id: Identifier stored on the volume

    Returns:
        (volume, mask)

    Raises:
        ShapeError: If a lesion cannot be placed inside the extents
    """
    rng = np.random.default_rng(spec.seed)
    count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    region, lesions = _place_lesions(spec, count, rng)

    channels = []
    for m in range(len(MODALITIES)):
        texture = ndimage.gaussian_filter(rng.standard_normal(spec.extents), spec.texture_scale)
        channel = spec.texture_amplitude * _standardize(texture)
        if region.any():
            variation = ndimage.gaussian_filter(rng.standard_normal(spec.extents), 1.0)
            heterogeneity = np.clip(1.0 + 0.25 * _standardize(variation), 0.5, 1.5)
            lesion_shift = spec.contrast_sign[m] * spec.contrast_magnitude[m] * heterogeneity
            channel = channel + np.where(region, lesion_shift, 0.0)
        if spec.noise_level > 0:
            channel = channel + spec.noise_level * rng.standard_normal(spec.extents)
        channels.append(_standardize(channel))

    data = np.stack(channels).astype(np.float32)
    mask_data = region.astype(np.uint8)
    mask = LesionMask(data=mask_data, lesion_count=count_components(mask_data), lesions=lesions)
    volume = Volume(case_id=case_id, data=data, spacing=spec.spacing)
    logger.debug(f"Generated {case_id}: {mask.lesion_count} lesion(s), {int(mask_data.sum())} voxels")
    return volume, mask
