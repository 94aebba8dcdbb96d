from __future__ import annotations

import warnings
from typing import Iterator

import numpy as np

from ..conv import conv3d, conv_transpose3d
from ..tensor import Tensor, get_default_dtype, no_grad

__all__ = [
    "Module",
    "Parameter",
    "Sequential",
    "Linear",
    "Conv3d",
    "ConvTranspose3d",
    "BatchNorm3d",
    "InstanceNorm3d",
    "SpectralNorm",
    "ResidualBlock",
    "ReLU",
    "LeakyReLU",
    "GELU",
    "Sigmoid",
    "global_avg_pool",
]


def Parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Parameter container with deterministic (insertion-order) traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", [])
        object.__setattr__(self, "_buffers", [])
        object.__setattr__(self, "_children", [])
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            if name not in self._children:
                self._children.append(name)
        elif isinstance(value, Tensor) and value.requires_grad:
            if name not in self._params:
                self._params.append(name)
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            self._buffers.append(name)
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in self._params:
            yield prefix + name, getattr(self, name)
        for name in self._children:
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name in self._children:
            yield from getattr(self, name).named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for name in self._children:
            yield from getattr(self, name).modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = np.array(buf, copy=True)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)
        for name, _ in self.named_buffers():
            owner, attr = self._resolve(name)
            object.__setattr__(owner, attr, np.array(state[name], copy=True))

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        *path, attr = dotted.split(".")
        owner = self
        for part in path:
            owner = getattr(owner, part)
        return owner, attr


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)
        self.n_layers = len(layers)

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self.n_layers))

    def __getitem__(self, i: int) -> Module:
        return getattr(self, str(i % self.n_layers))

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return x.leaky_relu(self.slope)


class GELU(Module):
    def forward(self, x):
        return x.gelu()


class Sigmoid(Module):
    def forward(self, x):
        return x.sigmoid()


def _rng(rng):
    return rng if rng is not None else np.random.default_rng()


class Linear(Module):
    """``y = x W^T + b`` with Xavier-uniform weights."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(_rng(rng).uniform(-limit, limit, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        y = x @ w.T
        return y + self.bias if self.bias is not None else y


class Conv3d(Module):
    """3-D convolution, Kaiming-normal initialised."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 4,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        bias: bool = True,
        rng=None,
    ):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding, self.dilation = kernel, stride, padding, dilation
        fan_in = in_channels * kernel**3
        self.weight = Parameter(
            _rng(rng).normal(0.0, np.sqrt(2.0 / fan_in), (out_channels, in_channels, kernel, kernel, kernel))
        )
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def output_size(self, n: int) -> int:
        return (n + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) // self.stride + 1

    def forward(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        return conv3d(x, w, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 4,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        bias: bool = True,
        rng=None,
    ):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding, self.dilation = kernel, stride, padding, dilation
        # fan-in of the equivalent direct convolution
        fan_in = in_channels * kernel**3 / stride**3
        self.weight = Parameter(
            _rng(rng).normal(0.0, np.sqrt(2.0 / fan_in), (in_channels, out_channels, kernel, kernel, kernel))
        )
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def output_size(self, n: int) -> int:
        return (n - 1) * self.stride - 2 * self.padding + self.dilation * (self.kernel - 1) + 1

    def forward(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        return conv_transpose3d(x, w, self.bias, self.stride, self.padding, self.dilation)


_SPATIAL = (2, 3, 4)


class BatchNorm3d(Module):
    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        dt = get_default_dtype()
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dt))
        self.register_buffer("running_var", np.ones(num_features, dtype=dt))

    def forward(self, x: Tensor) -> Tensor:
        shape = (1, self.num_features, 1, 1, 1)
        if self.training:
            axes = (0,) + _SPATIAL
            mean = x.mean(axis=axes, keepdims=True)
            centered = x - mean
            var = centered.square().mean(axis=axes, keepdims=True)
            xhat = centered / (var + self.eps).sqrt()
            n = x.size // self.num_features
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(shape)) * scale.reshape(shape)
        return xhat * self.weight.reshape(shape) + self.bias.reshape(shape)


class InstanceNorm3d(Module):
    """Per-sample, per-channel normalisation over the spatial axes."""

    def __init__(self, num_features: int, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.num_features, self.eps = num_features, eps
        self.weight = Parameter(np.ones(num_features)) if affine else None
        self.bias = Parameter(np.zeros(num_features)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        mean = x.mean(axis=_SPATIAL, keepdims=True)
        centered = x - mean
        var = centered.square().mean(axis=_SPATIAL, keepdims=True)
        xhat = centered / (var + self.eps).sqrt()
        if self.weight is None:
            return xhat
        shape = (1, self.num_features, 1, 1, 1)
        return xhat * self.weight.reshape(shape) + self.bias.reshape(shape)


def _l2normalize(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), 1e-12)


class SpectralNorm(Module):
    """Divide a wrapped layer's weight by a power-iteration estimate of its top singular value.

    ``u`` and ``v`` are refreshed only in training mode, so eval-mode forwards
    are deterministic functions of the weight.
    """

    def __init__(self, layer: Module, n_power_iterations: int = 1, rng=None):
        super().__init__()
        self.layer = layer
        self.n_power_iterations = n_power_iterations
        w2 = layer.weight.data.reshape(layer.weight.shape[0], -1)
        rng = _rng(rng)
        dt = layer.weight.dtype
        self.register_buffer("u", _l2normalize(rng.standard_normal(w2.shape[0])).astype(dt))
        self.register_buffer("v", _l2normalize(rng.standard_normal(w2.shape[1])).astype(dt))

    def power_iteration(self, n: int | None = None) -> None:
        w2 = self.layer.weight.data.reshape(self.layer.weight.shape[0], -1)
        u, v = self.u, self.v
        for _ in range(self.n_power_iterations if n is None else n):
            v = _l2normalize(w2.T @ u)
            u = _l2normalize(w2 @ v)
        self.u, self.v = u, v

    def sigma(self) -> Tensor:
        w = self.layer.weight
        w2 = w.reshape(w.shape[0], -1)
        return (Tensor(self.u[None, :]) @ w2 @ Tensor(self.v[:, None])).reshape(())

    def normalized_weight(self) -> Tensor:
        if self.training:
            self.power_iteration()
        sigma = self.sigma()
        if abs(float(sigma.data)) < 1e-12:
            warnings.warn("spectral norm estimate is ~0; returning the weight unnormalised", RuntimeWarning)
            return self.layer.weight
        return self.layer.weight / sigma

    def forward(self, x: Tensor) -> Tensor:
        return self.layer(x, weight=self.normalized_weight())


def spectral_normalize(wrapper: SpectralNorm) -> Tensor:
    return wrapper.normalized_weight()


class ResidualBlock(Module):
    """``x + f(x)``."""

    def __init__(self, body: Module):
        super().__init__()
        self.body = body

    def forward(self, x):
        return x + self.body(x)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=_SPATIAL)


def zero_parameters(module: Module) -> None:
    with no_grad():
        for p in module.parameters():
            p.data = np.zeros_like(p.data)
