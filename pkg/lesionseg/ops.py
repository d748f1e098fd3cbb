"""
Volumetric and neural-network operators built on the autodiff engine.

Every operator here is differentiable w.r.t. its Tensor inputs and takes
``[B, C, D, H, W]`` tensors where a spatial layout is involved.
"""

import logging
from collections.abc import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lesionseg.autodiff import Function, Tensor
from lesionseg.errors import ShapeError

logger = logging.getLogger(__name__)

L2_EPS = 1e-12

Triple = tuple[int, int, int]


def _triple(value: int | Sequence[int], name: str) -> Triple:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"{name} must have three entries, got {value}")
    return value  # type: ignore[return-value]


# ---- convolution --------------------------------------------------------------


class Conv3d(Function):
    """Cross-correlation of ``[B,Cin,D,H,W]`` with ``[Cout,Cin,kd,kh,kw]``."""

    def forward(self, x, w, stride: Triple, padding: Triple):
        if x.ndim != 5:
            raise ShapeError(f"conv3d input must be [B,C,D,H,W], got shape {x.shape}")
        if w.ndim != 5:
            raise ShapeError(f"conv3d kernel must be [Cout,Cin,kd,kh,kw], got shape {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv3d channel mismatch: input has {x.shape[1]} channels, "
                f"kernel expects {w.shape[1]}"
            )
        padded = tuple(n + 2 * p for n, p in zip(x.shape[2:], padding, strict=True))
        for axis, (n, k) in enumerate(zip(padded, w.shape[2:], strict=True)):
            if k > n:
                raise ShapeError(
                    f"conv3d kernel extent {k} exceeds padded input extent {n} on spatial axis {axis}"
                )

        self.stride, self.padding = stride, padding
        self.x_shape, self.w = x.shape, w
        if any(padding):
            x = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
        self.padded_shape = x.shape

        kd, kh, kw = w.shape[2:]
        sd, sh, sw = stride
        windows = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
        windows = windows[:, :, ::sd, ::sh, ::sw]
        self.windows = windows
        out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        return np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def backward(self, grad):
        w, windows = self.w, self.windows
        kd, kh, kw = w.shape[2:]
        sd, sh, sw = self.stride
        do, ho, wo = grad.shape[2:]

        gw = np.tensordot(grad, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))

        gx = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    contrib = np.tensordot(grad, w[:, :, i, j, k], axes=([1], [0]))
                    gx[
                        :,
                        :,
                        i : i + sd * do : sd,
                        j : j + sh * ho : sh,
                        k : k + sw * wo : sw,
                    ] += np.moveaxis(contrib, -1, 1)
        pd, ph, pw = self.padding
        D, H, W = self.x_shape[2:]
        gx = gx[:, :, pd : pd + D, ph : ph + H, pw : pw + W]
        return gx, gw.astype(w.dtype, copy=False)


def conv3d(
    x: Tensor,
    kernel: Tensor,
    stride: int | Sequence[int] = 1,
    padding: int | Sequence[int] = 0,
) -> Tensor:
    return Conv3d.apply(
        x, kernel, stride=_triple(stride, "stride"), padding=_triple(padding, "padding")
    )


# ---- trilinear resampling -----------------------------------------------------


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """
    Linear interpolation weights along one axis with half-pixel centers.

    Row ``i`` holds the weights that produce output sample ``i`` from the input
    samples. Source coordinates below zero are clamped, as are upper neighbours
    past the last sample, so every row sums to one.
    """
    if n_in == n_out:
        return np.eye(n_out, dtype=dtype)
    matrix = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(matrix, (rows, lo), 1.0 - frac)
    np.add.at(matrix, (rows, hi), frac)
    return matrix.astype(dtype)


class ResizeTrilinear(Function):
    def forward(self, x, target: Triple):
        if x.ndim != 5:
            raise ShapeError(f"resize_trilinear input must be [B,C,D,H,W], got shape {x.shape}")
        self.matrices = [
            interpolation_matrix(n_in, n_out, x.dtype)
            for n_in, n_out in zip(x.shape[2:], target, strict=True)
        ]
        out = x
        for axis, matrix in zip((2, 3, 4), self.matrices, strict=True):
            out = np.moveaxis(np.tensordot(out, matrix, axes=([axis], [1])), -1, axis)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        out = grad
        for axis, matrix in zip((2, 3, 4), self.matrices, strict=True):
            out = np.moveaxis(np.tensordot(out, matrix, axes=([axis], [0])), -1, axis)
        return out


def resize_trilinear(x: Tensor, target: Sequence[int]) -> Tensor:
    """Trilinear resampling of the spatial axes to ``target`` (align_corners off)."""
    target = _triple(target, "target")
    if min(target) < 1:
        raise ShapeError(f"resize target extents must be >= 1, got {target}")
    return ResizeTrilinear.apply(x, target=target)


# ---- pooling ------------------------------------------------------------------


class MaxPool3d(Function):
    def forward(self, x, kernel: Triple):
        B, C, D, H, W = x.shape
        kd, kh, kw = kernel
        if D % kd or H % kh or W % kw:
            raise ShapeError(f"max_pool3d kernel {kernel} does not tile extents {(D, H, W)}")
        self.x_shape, self.kernel = x.shape, kernel
        blocks = x.reshape(B, C, D // kd, kd, H // kh, kh, W // kw, kw)
        blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
            B, C, D // kd, H // kh, W // kw, kd * kh * kw
        )
        self.argmax = np.argmax(blocks, axis=-1)
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        B, C, D, H, W = self.x_shape
        kd, kh, kw = self.kernel
        onehot = np.zeros(grad.shape + (kd * kh * kw,), dtype=grad.dtype)
        np.put_along_axis(onehot, self.argmax[..., None], grad[..., None], axis=-1)
        onehot = onehot.reshape(B, C, D // kd, H // kh, W // kw, kd, kh, kw)
        return onehot.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(self.x_shape)


def max_pool3d(x: Tensor, kernel: int | Sequence[int]) -> Tensor:
    """Non-overlapping max pooling (stride equals kernel)."""
    return MaxPool3d.apply(x, kernel=_triple(kernel, "kernel"))


# ---- activations and normalisation ---------------------------------------------


class Softmax(Function):
    def forward(self, x, axis: int):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class L2Normalize(Function):
    def forward(self, x, axis: int, eps: float):
        self.axis = axis
        norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
        self.active = norm > eps
        self.denom = np.maximum(norm, eps)
        self.out = x / self.denom
        return self.out

    def backward(self, grad):
        y = self.out
        projected = grad - y * np.sum(grad * y, axis=self.axis, keepdims=True)
        return np.where(self.active, projected, grad) / self.denom


def l2_normalize(x: Tensor, axis: int = 1, eps: float = L2_EPS) -> Tensor:
    """Divide by ``max(norm, eps)`` along ``axis`` (the channel axis by default)."""
    return L2Normalize.apply(x, axis=axis, eps=eps)


class LeakyReLU(Function):
    def forward(self, x, slope: float):
        self.scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, grad):
        return grad * self.scale


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return LeakyReLU.apply(x, slope=slope)


class InstanceNorm(Function):
    """Per-sample, per-channel standardisation over the spatial axes."""

    def forward(self, x, eps: float):
        axes = tuple(range(2, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.out = centered * self.inv_std
        self.axes = axes
        return self.out

    def backward(self, grad):
        y, axes = self.out, self.axes
        g_mean = grad.mean(axis=axes, keepdims=True)
        gy_mean = (grad * y).mean(axis=axes, keepdims=True)
        return self.inv_std * (grad - g_mean - y * gy_mean)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return InstanceNorm.apply(x, eps=eps)


class BCEWithLogits(Function):
    """Elementwise ``-[z log σ(x) + (1-z) log(1-σ(x))]`` for constant targets ``z``."""

    def forward(self, x, z):
        self.x, self.z = x, z
        return np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))

    def backward(self, grad):
        e = np.exp(-np.abs(self.x))
        sig = np.where(self.x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return grad * (sig - self.z), None


def bce_with_logits(logits: Tensor, targets: np.ndarray | Tensor) -> Tensor:
    if not isinstance(targets, Tensor):
        targets = Tensor(np.asarray(targets, dtype=logits.dtype))
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    return BCEWithLogits.apply(logits, targets)


# ---- structural ---------------------------------------------------------------


class Concat(Function):
    def forward(self, *arrays, axis: int):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)
