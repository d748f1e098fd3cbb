"""
Gradient and invariant audits.

Both audits run in double precision on miniature models and return one
AuditResult per check; a check that raises is reported as failed.
"""

import logging
import tempfile
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from lesionseg.autodiff import Tensor, get_default_dtype, set_default_dtype
from lesionseg.backbone import BackboneConfig
from lesionseg.case_io import load_case, save_case
from lesionseg.checkpoint import load_checkpoint, save_checkpoint
from lesionseg.curriculum import Phase, ScheduleConfig, phase_at
from lesionseg.gradcheck import grad_check
from lesionseg.guidance import pseudo_embedding, similarity_head
from lesionseg.metrics import evaluate_case
from lesionseg.model import TextGuidedSegmenter
from lesionseg.objectives import align_loss, composite, downsample_mask, heat_loss, seg_loss
from lesionseg.ops import l2_normalize, softmax
from lesionseg.phantom import CaseSpec, generate_case
from lesionseg.refiner import RefinerConfig

logger = logging.getLogger(__name__)

MINI_BACKBONE = BackboneConfig(
    modalities=3, levels=2, base_channels=2, input_extents=(2, 4, 4), text_dim=4
)
MINI_REFINER = RefinerConfig(hidden=4, heads=2, num_text_tokens=2)
SIGMOID_BOUNDS = (1 / (1 + np.e), 1 / (1 + np.exp(-1.0)))


class AuditResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


@contextmanager
def double_precision() -> Iterator[None]:
    """Force float64 for the duration of an audit."""
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _run(name: str, check: Callable[[], tuple[bool, str]]) -> AuditResult:
    try:
        passed, detail = check()
    except Exception as e:
        passed, detail = False, f"{type(e).__name__}: {e}"
    level = logging.INFO if passed else logging.ERROR
    logger.log(level, f"{'PASS' if passed else 'FAIL'} {name} {detail}")
    return AuditResult(name=name, passed=passed, detail=detail)


def mini_model(seed: int = 0, refiner_gate: float | None = None) -> TextGuidedSegmenter:
    model = TextGuidedSegmenter(
        MINI_BACKBONE, embedding=pseudo_embedding(MINI_BACKBONE.text_dim, seed), seed=seed
    )
    if refiner_gate is not None:
        model.attach_refiner(MINI_REFINER.model_copy(update={"gate_init": refiner_gate}))
    return model


def _mini_batch(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal((1, 3) + MINI_BACKBONE.input_extents)
    m = (rng.random((1, 1) + MINI_BACKBONE.input_extents) < 0.3).astype(np.float64)
    m.flat[0] = 1.0
    return x, m


# ---- gradient audit -------------------------------------------------------------


def _worst(checks) -> tuple[bool, str]:
    worst = max(r.max_rel_error for r in checks)
    return all(r.passed for r in checks), f"max relative error {worst:.2e} over {len(checks)} trial(s)"


def _loss_trials(loss: Callable, trials: int, tol: float, as_probability: bool) -> tuple[bool, str]:
    reports = []
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        values = rng.uniform(0.05, 0.95, (1, 1, 2, 4, 4)) if as_probability else rng.normal(0, 2, (1, 1, 2, 4, 4))
        mask = (rng.random((1, 1, 2, 4, 4)) < 0.4).astype(np.float64)
        x = Tensor(values, requires_grad=True)
        reports.append(grad_check(lambda t, m=mask: loss(t, m), [x], eps=1e-6, tol=tol))
    return _worst(reports)


def _similarity_trials(trials: int, tol: float) -> tuple[bool, str]:
    reports = []
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        f = Tensor(rng.standard_normal((1, 4, 2, 2, 2)), requires_grad=True)
        t = rng.standard_normal(4)
        weights = rng.standard_normal((1, 1, 2, 2, 2))
        reports.append(
            grad_check(lambda p, t=t, w=weights: (similarity_head(p, t, 1.0) * w).sum(), [f], tol=tol)
        )
    return _worst(reports)


def _model_trials(
    trials: int, tol: float, max_coords: int, refiner_gate: float | None
) -> tuple[bool, str]:
    reports = []
    for trial in range(trials):
        rng = np.random.default_rng(trial)
        model = mini_model(seed=trial, refiner_gate=refiner_gate)
        x, m = _mini_batch(rng)
        m_s = downsample_mask(m, MINI_BACKBONE.bottleneck_extents)

        if refiner_gate is None:
            def fn(*_):
                out = model(x)
                total, _ = composite(
                    seg_loss(out.y, m), align_loss(out.s, m_s), heat_loss(out.s, m_s), 0.1, 0.1
                )
                return total
            params = model.parameters()
        else:
            def fn(*_):
                return seg_loss(model(x, use_refiner=True).y, m)
            params = (
                model.refiner.parameters()
                + model.backbone.head.parameters()
                + model.backbone.fuse.parameters()
            )
        reports.append(grad_check(fn, params, eps=1e-6, tol=tol, max_coords=max_coords, seed=trial))
    return _worst(reports)


def gradient_audit(trials: int = 100, tol: float = 1e-4, max_coords: int = 30) -> list[AuditResult]:
    """Finite-difference checks of every loss, the similarity head, the composite and the refiner."""
    with double_precision():
        return [
            _run("grad/seg_loss", lambda: _loss_trials(seg_loss, trials, tol, False)),
            _run("grad/align_loss", lambda: _loss_trials(align_loss, trials, tol, True)),
            _run("grad/heat_loss", lambda: _loss_trials(heat_loss, trials, tol, True)),
            _run("grad/similarity_head", lambda: _similarity_trials(trials, tol)),
            _run("grad/composite_phase2", lambda: _model_trials(trials, tol, max_coords, None)),
            _run("grad/refiner_path", lambda: _model_trials(trials, tol, max_coords, 0.5)),
        ]


# ---- invariant audit ------------------------------------------------------------


def _heatmap_bounds() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        s = similarity_head(Tensor(rng.standard_normal((1, 8, 2, 2, 2)) * rng.uniform(0.1, 10)),
                            rng.standard_normal(8), 1.0).data
        lo, hi = min(lo, s.min()), max(hi, s.max())
    ok = lo >= SIGMOID_BOUNDS[0] - 1e-6 and hi <= SIGMOID_BOUNDS[1] + 1e-6
    return ok, f"s range [{lo:.6f}, {hi:.6f}]"


def _normalisations() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((3, 5, 7)))
    sums = softmax(x, axis=-1).data.sum(axis=-1)
    norms = np.linalg.norm(l2_normalize(x, axis=1).data, axis=1)
    worst = max(np.abs(sums - 1).max(), np.abs(norms - 1).max())
    return worst <= 1e-9, f"max deviation {worst:.2e}"


def _gate_identity() -> tuple[bool, str]:
    model = mini_model(seed=3, refiner_gate=0.0)
    x, _ = _mini_batch(np.random.default_rng(3))
    out = model(x, use_refiner=True)
    return bool(np.array_equal(out.y.data, out.y_base.data)), "gamma=0 blended logits vs base logits"


def _alpha_identity() -> tuple[bool, str]:
    model = TextGuidedSegmenter(MINI_BACKBONE, embedding=pseudo_embedding(4, 4), seed=4)
    model.attach_refiner(MINI_REFINER.model_copy(update={"gate_init": 0.8, "alpha": 0.0}))
    x, _ = _mini_batch(np.random.default_rng(4))
    out = model(x, use_refiner=True)
    return bool(np.array_equal(out.y.data, out.y_base.data)), "alpha=0 blended logits vs base logits"


def _phase1_composite() -> tuple[bool, str]:
    model = mini_model(seed=5)
    x, m = _mini_batch(np.random.default_rng(5))
    m_s = downsample_mask(m, MINI_BACKBONE.bottleneck_extents)
    out = model(x)
    seg = seg_loss(out.y, m)
    total, breakdown = composite(seg, align_loss(out.s, m_s), heat_loss(out.s, m_s), 0.0, 0.0)
    total.backward()
    head_grads = [p.grad for p in model.similarity.parameters()]
    no_grad_to_head = all(g is None or not np.any(g) for g in head_grads)
    exact = breakdown.total == breakdown.seg
    return exact and no_grad_to_head, f"total==seg: {exact}, similarity head untouched: {no_grad_to_head}"


def _align_support() -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    s = Tensor(rng.uniform(0.2, 0.8, (2, 1, 4, 4, 4)), requires_grad=True)
    mask = (rng.random(s.shape) < 0.3).astype(np.float64)
    align_loss(s, mask).backward()
    background = np.abs(s.grad[mask == 0]).max()
    return background == 0.0, f"max |grad| on background {background}"


def _schedule_contract() -> tuple[bool, str]:
    cfg = ScheduleConfig(total_epochs=100, phase1_end=40, phase2_end=80, warmup_epochs=5, ramp_epochs=10)
    states = [phase_at(e, cfg) for e in range(100)]
    transfer = [s.lambda_align for s in states if s.phase == Phase.SEMANTIC_TRANSFER]
    monotone = all(b >= a for a, b in zip(transfer, transfer[1:]))
    zero_elsewhere = all(
        s.lambda_align == 0 and s.lambda_heat == 0 for s in states if s.phase != Phase.SEMANTIC_TRANSFER
    )
    refiner_late = all(s.refiner_enabled == (s.phase == Phase.AUX_OFF_REFINE) for s in states)
    transitions = sum(a.phase != b.phase for a, b in zip(states, states[1:]))
    ok = monotone and zero_elsewhere and refiner_late and transitions == 2
    return ok, f"monotone={monotone} zero_elsewhere={zero_elsewhere} transitions={transitions}"


def _metric_symmetry() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    spacing = (2.0, 1.0, 0.5)
    for _ in range(50):
        a = np.zeros((12, 12, 12), dtype=np.uint8)
        b = np.zeros_like(a)
        a[2:9, 2:9, 2:9] = rng.random((7, 7, 7)) < 0.6
        b[2:9, 2:9, 2:9] = rng.random((7, 7, 7)) < 0.6
        ab, ba = evaluate_case(a, b, spacing), evaluate_case(b, a, spacing)
        if ab.hd95 != ba.hd95 or ab.nsd != ba.nsd:
            return False, "hd95/nsd not symmetric"
        shifted = evaluate_case(np.roll(a, 2, axis=1), np.roll(b, 2, axis=1), spacing)
        if shifted.model_dump() != ab.model_dump():
            return False, "metrics not translation equivariant"
    return True, "50 random pairs"


def _generator_contract() -> tuple[bool, str]:
    for seed in range(5):
        spec = CaseSpec(seed=seed, extents=(16, 16, 16), spacing=(1.0, 1.0, 1.0),
                        lesion_count=(1, 2), lesion_radius_mm=(2.0, 3.0))
        volume, mask = generate_case(spec)
        if not spec.lesion_count[0] <= mask.lesion_count <= spec.lesion_count[1]:
            return False, f"seed {seed}: {mask.lesion_count} lesions"
        means = np.abs(volume.data.mean(axis=(1, 2, 3))).max()
        stds = np.abs(volume.data.std(axis=(1, 2, 3)) - 1).max()
        if means > 0.05 or stds > 0.05:
            return False, f"seed {seed}: mean {means:.3f}, std deviation {stds:.3f}"
    return True, "5 seeds"


def _round_trips() -> tuple[bool, str]:
    volume, mask = generate_case(CaseSpec(seed=11))
    model = mini_model(seed=11, refiner_gate=0.3)
    with tempfile.TemporaryDirectory() as tmp:
        loaded, loaded_mask = load_case(save_case(Path(tmp) / "case", volume, mask))
        path = save_checkpoint(Path(tmp) / "mini.ckpt", model, "schema_version = 1\n", "audit", 0)
        ckpt = load_checkpoint(path)
    case_ok = np.array_equal(loaded.data, volume.data) and np.array_equal(loaded_mask.data, mask.data)
    params_ok = all(np.array_equal(ckpt.blobs[n], p.data) for n, p in model.named_parameters())
    return case_ok and params_ok, f"case={case_ok} checkpoint={params_ok}"


def _determinism() -> tuple[bool, str]:
    x, _ = _mini_batch(np.random.default_rng(8))
    a = mini_model(seed=8, refiner_gate=0.2)(x).y.data
    b = mini_model(seed=8, refiner_gate=0.2)(x).y.data
    return bool(np.array_equal(a, b)), "two seeded models, same input"


INVARIANT_CHECKS: tuple[tuple[str, Callable[[], tuple[bool, str]]], ...] = (
    ("invariant/heatmap_bounds", _heatmap_bounds),
    ("invariant/normalisation", _normalisations),
    ("invariant/gate_identity", _gate_identity),
    ("invariant/alpha_identity", _alpha_identity),
    ("invariant/phase1_composite", _phase1_composite),
    ("invariant/align_gradient_support", _align_support),
    ("invariant/schedule", _schedule_contract),
    ("invariant/metric_symmetry", _metric_symmetry),
    ("invariant/generator", _generator_contract),
    ("invariant/round_trip", _round_trips),
    ("invariant/determinism", _determinism),
)


def invariant_audit() -> list[AuditResult]:
    with double_precision():
        return [_run(name, check) for name, check in INVARIANT_CHECKS]


def run_audit(what: str, trials: int = 100) -> list[AuditResult]:
    if what == "gradients":
        return gradient_audit(trials=trials)
    if what == "invariants":
        return invariant_audit()
    if what == "all":
        return gradient_audit(trials=trials) + invariant_audit()
    raise ValueError(f"unknown audit {what!r}")
