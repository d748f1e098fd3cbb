"""
Tests for the segmentation and auxiliary losses.
"""

import numpy as np
import pytest

from lesionseg.autodiff import Tensor
from lesionseg.errors import ShapeError
from lesionseg.gradcheck import grad_check
from lesionseg.objectives import (
    LossBreakdown,
    align_loss,
    composite,
    downsample_mask,
    heat_loss,
    seg_loss,
)

SIGMOID_ONE = 0.7310585786300049


@pytest.mark.unit
class TestDownsampleMask:
    def test_all_zero(self):
        assert not downsample_mask(np.zeros((8, 8, 8)), (2, 2, 2)).any()

    def test_single_voxel_marks_covering_block(self):
        mask = np.zeros((16, 32, 32), dtype=np.uint8)
        mask[5, 17, 30] = 1
        small = downsample_mask(mask, (4, 8, 8))
        assert small.sum() == 1
        assert small[1, 4, 7] == 1

    def test_block_scan_oracle(self, rng):
        mask = (rng.random((16, 32, 32)) > 0.995).astype(np.uint8)
        small = downsample_mask(mask, (4, 8, 8))
        for z, y, x in np.ndindex(4, 8, 8):
            block = mask[4 * z : 4 * z + 4, 4 * y : 4 * y + 4, 4 * x : 4 * x + 4]
            assert small[z, y, x] == int(block.any())

    def test_batched_leading_axes(self, rng):
        mask = (rng.random((2, 1, 4, 4, 4)) > 0.8).astype(np.uint8)
        small = downsample_mask(mask, (2, 2, 2))
        assert small.shape == (2, 1, 2, 2, 2)
        np.testing.assert_array_equal(small[1, 0], downsample_mask(mask[1, 0], (2, 2, 2)))

    def test_non_dividing_target(self):
        with pytest.raises(ShapeError):
            downsample_mask(np.zeros((6, 6, 6)), (4, 3, 3))


@pytest.mark.unit
class TestAlignLoss:
    def test_hand_arithmetic(self):
        mask = np.zeros((1, 1, 2, 4, 4))
        mask.reshape(-1)[:10] = 1
        s = Tensor(np.full(mask.shape, SIGMOID_ONE))
        expected = 1 - 10 * SIGMOID_ONE / (10 + 1e-6)
        assert align_loss(s, mask).item() == pytest.approx(expected, abs=1e-9)

    def test_empty_mask_gives_one(self, rng):
        s = Tensor(rng.uniform(size=(1, 1, 2, 2, 2)))
        assert align_loss(s, np.zeros((1, 1, 2, 2, 2))).item() == 1.0

    def test_perfect_alignment(self):
        ones = np.ones((1, 1, 2, 2, 2))
        assert align_loss(Tensor(ones), ones).item() == pytest.approx(0.0, abs=1e-6)

    def test_background_gets_no_gradient(self, rng):
        mask = (rng.random((1, 1, 2, 4, 4)) > 0.5).astype(float)
        s = Tensor(rng.uniform(0.3, 0.7, size=mask.shape), requires_grad=True)
        align_loss(s, mask).backward()
        assert np.all(s.grad[mask == 0] == 0.0)
        assert np.all(s.grad[mask == 1] < 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            align_loss(Tensor(np.zeros((1, 1, 2, 2, 2))), np.zeros((1, 1, 2, 2, 1)))


@pytest.mark.unit
class TestHeatLoss:
    def test_half_is_log_two(self, rng):
        mask = (rng.random((1, 1, 2, 2, 2)) > 0.5).astype(float)
        assert heat_loss(Tensor(np.full(mask.shape, 0.5)), mask).item() == pytest.approx(np.log(2))

    def test_background_at_lower_bound(self):
        s = Tensor(np.full((1, 1, 2, 2, 2), 1 - SIGMOID_ONE))
        loss = heat_loss(s, np.zeros(s.shape)).item()
        assert loss == pytest.approx(-np.log(SIGMOID_ONE), abs=1e-9)
        assert loss == pytest.approx(0.313262, abs=1e-6)

    def test_voxel_loop_oracle(self, rng):
        s = rng.uniform(0.05, 0.95, size=(1, 1, 4, 4, 4))
        mask = (rng.random(s.shape) > 0.5).astype(float)
        total = 0.0
        for idx in np.ndindex(s.shape):
            total -= mask[idx] * np.log(s[idx]) + (1 - mask[idx]) * np.log(1 - s[idx])
        assert heat_loss(Tensor(s), mask).item() == pytest.approx(total / s.size, abs=1e-12)

    def test_clamped_at_extremes(self):
        s = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 1, 2))
        loss = heat_loss(s, np.array([1.0, 0.0]).reshape(1, 1, 1, 1, 2)).item()
        assert np.isfinite(loss)
        assert loss == pytest.approx(-np.log(1e-6))

    def test_foreground_floor(self, rng):
        """Per-voxel foreground BCE is at least -ln(sigmoid(1)) when s is a similarity output."""
        s = rng.uniform(1 - SIGMOID_ONE, SIGMOID_ONE, size=(1, 1, 2, 2, 2))
        loss = heat_loss(Tensor(s), np.ones(s.shape)).item()
        assert loss >= -np.log(SIGMOID_ONE) - 1e-12

    def test_monotone_in_foreground_score(self, rng):
        s = rng.uniform(0.3, 0.6, size=(1, 1, 2, 2, 2))
        mask = np.zeros(s.shape)
        mask[0, 0, 0, 0, 0] = 1
        raised = s.copy()
        raised[0, 0, 0, 0, 0] += 0.1
        assert heat_loss(Tensor(raised), mask).item() < heat_loss(Tensor(s), mask).item()
        assert align_loss(Tensor(raised), mask).item() < align_loss(Tensor(s), mask).item()


@pytest.mark.unit
class TestSegLoss:
    def test_near_perfect_prediction(self, rng):
        mask = (rng.random((1, 1, 4, 4, 4)) > 0.7).astype(float)
        logits = Tensor(np.where(mask > 0, 20.0, -20.0))
        assert seg_loss(logits, mask).item() < 1e-3

    def test_zero_logits_bce_component(self, rng):
        mask = (rng.random((1, 1, 2, 2, 2)) > 0.5).astype(float)
        p_sum, m_sum = 0.5 * mask.size, mask.sum()
        dice = 1 - (2 * 0.5 * m_sum + 1e-5) / (p_sum + m_sum + 1e-5)
        expected = 0.5 * dice + 0.5 * np.log(2)
        assert seg_loss(Tensor(np.zeros(mask.shape)), mask).item() == pytest.approx(expected, abs=1e-12)

    def test_scalar_oracle(self, rng):
        logits = rng.normal(size=(2, 1, 3, 3, 3))
        mask = (rng.random(logits.shape) > 0.6).astype(float)
        p = 1 / (1 + np.exp(-logits))
        dice = 1 - (2 * (p * mask).sum() + 1e-5) / (p.sum() + mask.sum() + 1e-5)
        bce = -(mask * np.log(p) + (1 - mask) * np.log(1 - p)).mean()
        assert seg_loss(Tensor(logits), mask).item() == pytest.approx(0.5 * dice + 0.5 * bce, abs=1e-9)

    @pytest.mark.parametrize("loss", [seg_loss, align_loss, heat_loss])
    def test_gradients(self, rng, loss):
        mask = (rng.random((1, 1, 2, 3, 3)) > 0.5).astype(float)
        x = Tensor(rng.uniform(0.1, 0.9, size=mask.shape), requires_grad=True)
        assert grad_check(lambda a: loss(a, mask), [x]).passed


@pytest.mark.unit
class TestComposite:
    def _parts(self, rng):
        seg = Tensor(np.array(0.8))
        align = Tensor(np.array(0.4))
        heat = Tensor(np.array(0.6))
        return seg, align, heat

    def test_zero_weights_total_is_seg(self, rng):
        seg, align, heat = self._parts(rng)
        total, breakdown = composite(seg, align, heat, 0.0, 0.0)
        assert total is seg
        assert breakdown.total == breakdown.seg == 0.8
        assert breakdown.align == 0.4 and breakdown.heat == 0.6

    def test_weighted_sum(self, rng):
        seg, align, heat = self._parts(rng)
        total, breakdown = composite(seg, align, heat, 0.05, 0.05)
        assert total.item() == pytest.approx(0.8 + 0.05 * (0.4 + 0.6))
        assert breakdown.lambda_align == 0.05

    def test_missing_term_with_weight(self, rng):
        seg, _, heat = self._parts(rng)
        with pytest.raises(ValueError):
            composite(seg, None, heat, 0.1, 0.1)

    def test_breakdown_detects_non_finite(self):
        breakdown = LossBreakdown(
            seg=float("nan"), align=0.0, heat=0.0, lambda_align=0.0, lambda_heat=0.0, total=float("nan")
        )
        assert not breakdown.is_finite()
