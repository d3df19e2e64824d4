#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-06
# @Filename: nn.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

from typing import Iterator

import numpy

from spda.tensor import (
    Tensor,
    batch_norm3d,
    conv3d,
    conv_transpose3d,
    linear,
    relu,
)


__all__ = [
    "Parameter",
    "Module",
    "Linear",
    "Conv3d",
    "ConvTranspose3d",
    "BatchNorm3d",
    "ConvBlock",
]


class Parameter(Tensor):
    """A trainable leaf tensor.

    Parameters
    ----------
    data
        Initial values.
    manifold
        ``euclidean`` parameters are updated with RMSprop, ``stiefel``
        parameters (column-orthonormal matrices) with Riemannian gradient
        descent.

    """

    def __init__(self, data, manifold: str = "euclidean", name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.manifold = manifold

    def __repr__(self):
        return f"<Parameter shape={self.shape} manifold={self.manifold}>"


class Module:
    """Base class for parameter-holding layers.

    Parameters, sub-modules and lists of sub-modules are discovered from the
    instance attributes in assignment order, which fixes the declaration order
    used by optimisers and checkpoints. Non-trainable state (e.g. running
    statistics) is listed in ``_buffers`` by attribute name.

    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for ii, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{ii}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [param for _, param in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, numpy.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator[Module]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None


def _uniform(rng: numpy.random.Generator, bound: float, shape) -> numpy.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Fully connected layer, weights uniform in ``±√(1/fan_in)``, zero bias."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: numpy.random.Generator,
    ):
        super().__init__()

        bound = numpy.sqrt(1.0 / in_features)
        self.weight = Parameter(_uniform(rng, bound, (out_features, in_features)))
        self.bias = Parameter(numpy.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv3d(Module):
    """3D convolution preserving the spatial shape (odd kernel sizes)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: numpy.random.Generator,
        kernel_size: int = 3,
        bias: bool = True,
    ):
        super().__init__()

        fan_in = in_channels * kernel_size**3
        bound = numpy.sqrt(6.0 / fan_in)
        shape = (out_channels, in_channels) + (kernel_size,) * 3

        self.weight = Parameter(_uniform(rng, bound, shape))
        self.bias = Parameter(numpy.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias)


class ConvTranspose3d(Module):
    """Stride-``factor`` transposed convolution for decoder upsampling."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: numpy.random.Generator,
        factor: int = 2,
    ):
        super().__init__()

        bound = numpy.sqrt(6.0 / in_channels)
        shape = (in_channels, out_channels) + (factor,) * 3

        self.weight = Parameter(_uniform(rng, bound, shape))
        self.bias = Parameter(numpy.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose3d(x, self.weight, self.bias)


class BatchNorm3d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()

        self.gamma = Parameter(numpy.ones(channels))
        self.beta = Parameter(numpy.zeros(channels))
        self.running_mean = numpy.zeros(channels)
        self.running_var = numpy.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm3d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBlock(Module):
    """Two (3×3×3 conv, batch norm, ReLU) stages.

    The convolutions carry no bias since batch normalisation removes it.

    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: numpy.random.Generator,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        super().__init__()

        self.conv1 = Conv3d(in_channels, out_channels, rng, bias=False)
        self.norm1 = BatchNorm3d(out_channels, momentum=momentum, eps=eps)
        self.conv2 = Conv3d(out_channels, out_channels, rng, bias=False)
        self.norm2 = BatchNorm3d(out_channels, momentum=momentum, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.norm1(self.conv1(x)))
        return relu(self.norm2(self.conv2(x)))
