"""
Tests for the synthetic phantom generator.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from lesionseg.errors import ShapeError
from lesionseg.phantom import (
    MODALITIES,
    CaseSpec,
    Ellipsoid,
    Volume,
    count_components,
    generate_case,
)


@pytest.fixture
def spec():
    return CaseSpec(seed=5, extents=(16, 16, 16), spacing=(1.0, 1.0, 1.0), lesion_radius_mm=(2.0, 3.0))


@pytest.mark.unit
class TestEllipsoid:
    def test_rasterize_matches_voxel_loop(self):
        lesion = Ellipsoid(center=(3.2, 4.0, 4.5), radii=(2.0, 3.0, 1.5))
        region = lesion.rasterize((8, 9, 10))
        for z, y, x in np.ndindex(8, 9, 10):
            inside = ((z - 3.2) / 2.0) ** 2 + ((y - 4.0) / 3.0) ** 2 + ((x - 4.5) / 1.5) ** 2 <= 1
            assert region[z, y, x] == inside


@pytest.mark.unit
class TestGenerateCase:
    def test_noise_free_mask_is_union_of_ellipsoids(self, spec):
        volume, mask = generate_case(spec.model_copy(update={"noise_level": 0.0}))
        union = np.zeros(spec.extents, dtype=bool)
        for lesion in mask.lesions:
            union |= lesion.rasterize(spec.extents)
        np.testing.assert_array_equal(mask.data, union.astype(np.uint8))
        assert mask.lesion_count == len(mask.lesions) == count_components(mask.data)

    def test_zero_lesions(self, spec):
        volume, mask = generate_case(spec.model_copy(update={"lesion_count": (0, 0)}))
        assert mask.lesion_count == 0
        assert not mask.data.any()
        assert volume.data.shape == (3, 16, 16, 16)

    def test_seeded(self, spec):
        a, b = generate_case(spec), generate_case(spec)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)
        c = generate_case(spec.model_copy(update={"seed": 6}))
        assert not np.array_equal(a[0].data, c[0].data)

    def test_channels_standardised(self, spec):
        volume, _ = generate_case(spec)
        assert volume.data.dtype == np.float32
        for channel in volume.data:
            assert channel.mean() == pytest.approx(0.0, abs=1e-5)
            assert channel.std() == pytest.approx(1.0, abs=1e-4)

    def test_contrast_signs(self, spec):
        volume, mask = generate_case(spec.model_copy(update={"noise_level": 0.0}))
        inside, outside = mask.data > 0, mask.data == 0
        for index, sign in enumerate(spec.contrast_sign):
            difference = volume.data[index][inside].mean() - volume.data[index][outside].mean()
            assert np.sign(difference) == sign, MODALITIES[index]

    def test_lesion_too_large(self):
        spec = CaseSpec(extents=(4, 16, 16), spacing=(1.0, 1.0, 1.0), lesion_radius_mm=(2.0, 3.0))
        with pytest.raises(ShapeError):
            generate_case(spec)


@pytest.mark.unit
class TestCaseSpec:
    @pytest.mark.parametrize(
        "update",
        [
            {"extents": (0, 4, 4)},
            {"spacing": (1.0, 0.0, 1.0)},
            {"lesion_count": (2, 1)},
            {"lesion_radius_mm": (0.5, 1.0)},
            {"contrast_sign": (1, 0, 1)},
            {"contrast_magnitude": (1.0,)},
        ],
    )
    def test_rejects_invalid(self, update):
        with pytest.raises(ValidationError):
            CaseSpec(spacing=(1.0, 1.0, 1.0), **update)

    def test_volume_rejects_non_finite(self):
        data = np.zeros((3, 2, 2, 2))
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            Volume(case_id="x", data=data, spacing=(1.0, 1.0, 1.0))
