"""
Tests for the reverse-mode autodiff engine.
"""

import numpy as np
import pytest

from lesionseg.autodiff import (
    Tensor,
    detect_anomaly,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
    tensor,
)
from lesionseg.errors import NonFiniteError, ShapeError
from lesionseg.gradcheck import grad_check


@pytest.mark.unit
class TestTensorBasics:
    """Construction, dtype handling and graph switches."""

    def test_default_dtype_applies_to_python_data(self):
        """Lists and ints take the engine's default dtype."""
        assert tensor([1, 2, 3]).dtype == np.float64
        set_default_dtype("float32")
        assert get_default_dtype() == np.float32
        assert tensor([1, 2, 3]).dtype == np.float32

    def test_float_arrays_keep_their_dtype(self):
        """Floating numpy arrays are wrapped without a cast."""
        t = Tensor(np.ones(3, dtype=np.float32))
        assert t.dtype == np.float32

    def test_unsupported_precision_rejected(self):
        with pytest.raises(ValueError):
            set_default_dtype("float16")

    def test_no_grad_disables_recording(self):
        """Results computed under no_grad have no creator and need no gradient."""
        x = tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = (x * 2.0).sum()
        assert is_grad_enabled()
        assert not y.requires_grad
        assert y.creator is None

    def test_detach_cuts_graph(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        y = (x * 3.0).detach()
        assert not y.requires_grad
        np.testing.assert_array_equal(y.data, [3.0, 6.0])


@pytest.mark.unit
class TestBackward:
    """Analytic gradients of the elementary operators."""

    def test_product_rule(self):
        x = tensor([2.0, -1.0], requires_grad=True)
        y = tensor([3.0, 4.0], requires_grad=True)
        (x * y).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0, 4.0])
        np.testing.assert_allclose(y.grad, [2.0, -1.0])

    def test_gradient_accumulates_over_shared_nodes(self):
        """A tensor used twice receives the sum of both paths."""
        x = tensor([1.5], requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [2 * 1.5 + 1])

    def test_broadcast_gradient_is_reduced(self):
        """Broadcast operands get gradients in their own shape."""
        x = tensor(np.ones((2, 3)), requires_grad=True)
        b = tensor(np.ones((1, 3)), requires_grad=True)
        (x + b).sum().backward()
        assert b.grad.shape == (1, 3)
        np.testing.assert_allclose(b.grad, [[2.0, 2.0, 2.0]])

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            tensor(np.ones((2, 3))) @ tensor(np.ones((2, 3)))

    def test_getitem_scatters_gradient(self):
        x = tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x[:, 1].sum().backward()
        np.testing.assert_allclose(x.grad, [[0, 1, 0], [0, 1, 0]])

    def test_clamp_blocks_gradient_outside_range(self):
        x = tensor([-2.0, 0.5, 2.0], requires_grad=True)
        x.clamp(0.0, 1.0).sum().backward()
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])

    def test_sigmoid_is_stable_for_large_inputs(self):
        x = tensor([-800.0, 0.0, 800.0])
        np.testing.assert_allclose(x.sigmoid().data, [0.0, 0.5, 1.0])

    @pytest.mark.parametrize(
        "fn",
        [
            lambda x, y: (x * y + x / (y * y + 1.0)).sum(),
            lambda x, y: ((x @ y.transpose()).tanh()).mean(),
            lambda x, y: (x.exp() * y.sigmoid()).sum(axis=1).mean(),
            lambda x, y: ((x * x + 1.0).log() - y**3).reshape(6).sum(),
            lambda x, y: (x.permute(1, 0) * y.permute(1, 0)).mean(axis=0).sum(),
        ],
    )
    def test_composite_expressions_match_finite_differences(self, fn, rng):
        x = tensor(rng.normal(size=(2, 3)), requires_grad=True)
        y = tensor(rng.normal(size=(2, 3)), requires_grad=True)
        report = grad_check(fn, [x, y])
        assert report.passed, report.max_rel_error


@pytest.mark.unit
class TestAnomalyDetection:
    def test_anomaly_mode_names_operation(self):
        """With detection on, the first non-finite forward result raises."""
        detect_anomaly(True)
        with pytest.raises(NonFiniteError, match="Log"):
            tensor([-1.0]).log()

    def test_anomaly_mode_off_lets_nan_through(self):
        with np.errstate(invalid="ignore"):
            assert np.isnan(tensor([-1.0]).log().data[0])
