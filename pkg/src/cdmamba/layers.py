"""Parameter-holding layers on top of the autodiff primitives.

Weight init follows one scheme everywhere: uniform(-1/sqrt(fan_in),
+1/sqrt(fan_in)) for linear/conv weights, ones for norm gains, zeros for
biases. Construction order is fixed, so a seeded generator makes the whole
model bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _walk(value, name: str):
    """Yield (name, tensor) pairs from arbitrarily nested containers."""
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, item in value.items():
            yield from _walk(item, f"{name}.{k}")


class Module:
    """Base class; parameters are discovered by attribute traversal."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add_channel_bias(y, self.bias)
        return y


class Conv2d(Module):
    """3x3/1x1 convolution layer, optionally factorized depthwise-separable.

    Separable mode is a per-channel kxk conv followed by a 1x1 pointwise conv;
    the bias lives on the pointwise stage.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int | None = None,
                 bias: bool = True, depthwise_separable: bool = False):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.separable = depthwise_separable and kernel_size > 1
        if self.separable:
            self.dw_weight = uniform_init(
                rng, (in_channels, kernel_size, kernel_size), kernel_size * kernel_size)
            self.pw_weight = uniform_init(rng, (out_channels, in_channels, 1, 1), in_channels)
        else:
            self.weight = uniform_init(
                rng, (out_channels, in_channels, kernel_size, kernel_size),
                in_channels * kernel_size * kernel_size)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if self.separable:
            mid = ad.conv2d_depthwise(x, self.dw_weight, stride=self.stride, padding=self.padding)
            return ad.conv2d(mid, self.pw_weight, self.bias, stride=1, padding=0)
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Conv1dDepthwise(Module):
    """Causal per-channel convolution along the token axis (no bias)."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (channels, kernel_size), kernel_size)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d_depthwise(x, self.weight, causal=True)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)
