"""
Finite-difference verification of analytic gradients.
"""

import logging
from collections.abc import Callable, Sequence

import numpy as np
from pydantic import BaseModel, Field

from lesionseg.autodiff import Tensor, no_grad
from lesionseg.errors import NonFiniteError

logger = logging.getLogger(__name__)


class CheckReport(BaseModel):
    """Outcome of a gradient check."""

    max_rel_error: float = Field(..., description="Largest relative error over all inputs")
    per_input: list[float] = Field(..., description="Largest relative error per input tensor")
    coordinates_checked: int = Field(..., description="Number of perturbed coordinates")
    eps: float
    tol: float
    passed: bool


def _evaluate(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    with no_grad():
        value = float(np.asarray(fn(*inputs).data))
    if not np.isfinite(value):
        raise NonFiniteError(f"gradient check function returned {value}")
    return value


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> CheckReport:
    """
    Compare analytic gradients with central finite differences.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where ``a`` is the analytic and ``n`` the numeric derivative; the floor keeps
    near-zero derivatives from turning rounding noise into large ratios.

    Args:
        fn: Deterministic function of ``inputs`` returning a scalar Tensor
        inputs: Tensors to differentiate with respect to (requires_grad=True)
        eps: Finite-difference step, in (0, 1e-2]
        tol: Pass threshold on the maximum relative error
        max_coords: If set, check only this many randomly chosen coordinates
            across all inputs
        seed: Seed for coordinate sampling
        floor: Denominator floor for the relative error

    Returns:
        CheckReport with per-input maxima

    Raises:
        ValueError: If eps is out of range
        NonFiniteError: If fn returns a non-finite value
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"gradient check needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"gradient check function returned {out.data}")
    out.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else np.array(t.grad) for t in inputs
    ]

    coords = [(i, idx) for i, t in enumerate(inputs) for idx in np.ndindex(t.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[p] for p in sorted(picks)]

    per_input = [0.0] * len(inputs)
    for i, idx in coords:
        data = inputs[i].data
        original = data[idx]
        data[idx] = original + eps
        f_plus = _evaluate(fn, inputs)
        data[idx] = original - eps
        f_minus = _evaluate(fn, inputs)
        data[idx] = original

        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[i][idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        per_input[i] = max(per_input[i], err)

    worst = max(per_input) if per_input else 0.0
    report = CheckReport(
        max_rel_error=worst,
        per_input=per_input,
        coordinates_checked=len(coords),
        eps=eps,
        tol=tol,
        passed=worst < tol,
    )
    logger.debug(f"Gradient check: max relative error {worst:.3e} over {len(coords)} coordinates")
    return report
