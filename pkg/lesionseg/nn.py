"""
Parameter containers and layers for the segmentation network.

Parameter names are "/"-joined attribute paths (``backbone/head/weight``) so
that they map directly onto checkpoint blob names.
"""

import logging
from collections.abc import Iterator

import numpy as np

from lesionseg.autodiff import Tensor, get_default_dtype
from lesionseg.errors import ShapeError
from lesionseg.ops import conv3d, instance_norm, leaky_relu

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


class Parameter(Tensor):
    """A trainable tensor."""

    def __init__(self, data: np.ndarray):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Base class registering Parameters and sub-Modules assigned as attributes."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}/")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"State mismatch; missing={missing}, unexpected={unexpected}")
        for name, array in state.items():
            if name not in own:
                continue
            if own[name].shape != array.shape:
                raise ShapeError(
                    f"Parameter {name} has shape {own[name].shape}, state has {array.shape}"
                )
            own[name].data = np.array(array, dtype=own[name].dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules: list[Module]):
        super().__init__()
        for i, module in enumerate(modules):
            setattr(self, str(i), module)
        object.__setattr__(self, "_items", list(modules))

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]


def fan_in_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int
) -> np.ndarray:
    """He-style uniform initialisation for leaky-rectifier networks."""
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.in_channels, self.out_channels = in_channels, out_channels
        self.weight = Parameter(
            fan_in_uniform(rng, (out_channels, in_channels, k, k, k), in_channels * k**3)
        )
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = conv3d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1, 1)
        return out


class Linear(Module):
    """Affine map over the last axis: ``x @ W.T + b``."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight.transpose()
        if self.bias is not None:
            out = out + self.bias
        return out


class InstanceNorm3d(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        y = instance_norm(x, self.eps)
        return y * self.weight.reshape(1, -1, 1, 1, 1) + self.bias.reshape(1, -1, 1, 1, 1)


class ConvBlock(Module):
    """Two (3x3x3 conv, instance norm, leaky ReLU) stages; the first may downsample."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        bias: bool = True,
        rng: np.random.Generator | None = None,
    ):
        super().__init__()
        self.conv1 = Conv3d(in_channels, out_channels, 3, stride=stride, bias=bias, rng=rng)
        self.norm1 = InstanceNorm3d(out_channels)
        self.conv2 = Conv3d(out_channels, out_channels, 3, bias=bias, rng=rng)
        self.norm2 = InstanceNorm3d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = leaky_relu(self.norm1(self.conv1(x)), LEAKY_SLOPE)
        return leaky_relu(self.norm2(self.conv2(x)), LEAKY_SLOPE)
