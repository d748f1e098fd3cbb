"""
Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps an ``np.ndarray`` and, when it was produced by a
differentiable operation, a reference to the ``Function`` that created it.
Calling ``backward()`` on a scalar result walks the recorded graph in reverse
topological order and accumulates ``grad`` on every tensor that requires it.
"""

import logging
import os
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from typing import Any

import numpy as np

from lesionseg.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True
_DETECT_ANOMALY = os.getenv("LESIONSEG_DETECT_ANOMALY", "0") == "1"

ArrayLike = Any


def set_default_dtype(dtype: str | np.dtype) -> None:
    """Set the floating dtype used for new tensors ("float64" or "float32")."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision: {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def detect_anomaly(enabled: bool = True) -> None:
    """Check every forward result for NaN/Inf and raise on the first one."""
    global _DETECT_ANOMALY
    _DETECT_ANOMALY = enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning one
    gradient array (or None) per input tensor. Anything needed by ``backward``
    is stashed on ``self`` during ``forward``.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...] | np.ndarray:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        """Run the forward pass and wrap the result in a graph-connected Tensor."""
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)

        if _DETECT_ANOMALY and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")

        requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        return Tensor(
            out_data,
            requires_grad=requires_grad,
            creator=func if requires_grad else None,
        )

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so that ``grad`` matches ``to_shape``."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for dim, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


class Tensor:
    """Dense real array with optional gradient tracking."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Function | None = None,
        name: str | None = None,
    ):
        if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(
            data.dtype, np.floating
        ):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: np.ndarray | None = None
        self.name = name

    # ---- properties -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Return a graph-free tensor sharing this tensor's data."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # ---- backward ---------------------------------------------------------

    def backward(self, grad: ArrayLike | None = None) -> None:
        """
        Back-propagate from this tensor through the recorded graph.

        Args:
            grad: Gradient w.r.t. this tensor; defaults to ones (scalar loss).
        """
        if not self.requires_grad:
            return

        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate_grad(np.asarray(grad, dtype=self.dtype))

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if id(node) in visited:
                continue
            if children_done:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        for node in reversed(order):
            if node.creator is None or node.grad is None:
                continue
            grads = node.creator.backward(node.grad)
            if not isinstance(grads, tuple):
                grads = (grads,)
            for parent, g in zip(node.creator.tensors, grads, strict=True):
                if g is not None and parent.requires_grad:
                    parent._accumulate_grad(g)

    def _accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            grad = np.broadcast_to(grad, self.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    # ---- operators ----------------------------------------------------------

    def _lift(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self._lift(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return Matmul.apply(self, self._lift(other))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def clamp(self, low: float | None = None, high: float | None = None) -> "Tensor":
        return Clamp.apply(self, low=low, high=high)

    def sum(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes: int) -> "Tensor":
        return Permute.apply(self, axes=axes)

    def transpose(self) -> "Tensor":
        """Swap the last two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return Permute.apply(self, axes=tuple(axes))

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    """Create a tensor in the default dtype."""
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


# ---- elementwise --------------------------------------------------------------


class Add(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, x, y):
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.y, self.x.shape),
            self.unbroadcast(grad * self.x, self.y.shape),
        )


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return self.unbroadcast(gx, self.x.shape), self.unbroadcast(gy, self.y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return -grad


class Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x**exponent

    def backward(self, grad):
        return grad * self.exponent * self.x ** (self.exponent - 1.0)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return grad * self.out


class Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return grad / self.x


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


class Sigmoid(Function):
    def forward(self, x):
        self.out = _stable_sigmoid(x)
        return self.out

    def backward(self, grad):
        return grad * self.out * (1.0 - self.out)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return grad * (1.0 - self.out * self.out)


class Clamp(Function):
    def forward(self, x, low=None, high=None):
        lo = -np.inf if low is None else low
        hi = np.inf if high is None else high
        self.mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return grad * self.mask


# ---- reductions ---------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(np.sum(x, axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad, self.shape)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        return np.asarray(np.mean(x, axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return np.broadcast_to(grad / self.count, self.shape)


# ---- shape --------------------------------------------------------------------


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.shape)


class Permute(Function):
    def forward(self, x, axes):
        self.axes = tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return np.transpose(grad, np.argsort(self.axes))


class GetItem(Function):
    def forward(self, x, index):
        self.shape, self.index, self.dtype = x.shape, index, x.dtype
        return np.array(x[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return out


class Matmul(Function):
    def forward(self, x, y):
        if x.ndim < 2 or y.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {x.shape} and {y.shape}")
        if x.shape[-1] != y.shape[-2]:
            raise ShapeError(f"matmul inner dimensions differ: {x.shape} @ {y.shape}")
        self.x, self.y = x, y
        return np.matmul(x, y)

    def backward(self, grad):
        gx = np.matmul(grad, np.swapaxes(self.y, -1, -2))
        gy = np.matmul(np.swapaxes(self.x, -1, -2), grad)
        return self.unbroadcast(gx, self.x.shape), self.unbroadcast(gy, self.y.shape)


def matmul(x: Tensor, y: Tensor) -> Tensor:
    return Matmul.apply(x, y)
