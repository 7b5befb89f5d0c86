"""Learnable building blocks composed from engine ops.

Layers own their Parameters (created at construction time, so a fixed rng
and construction order give reproducible initial weights) and expose
``parameters()`` / ``buffers()`` walks in deterministic attribute order.
All layers run on batched maps [B, C, H, W]; channel axis is 1.
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from . import sphere
from .engine import Parameter, Tensor
from .errors import ConfigError, ShapeError


def fan_in_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """He-style init: normal with std sqrt(2 / fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


class Layer:
    """Base for parameterised blocks; children found by attribute walk."""

    def children(self):
        for value in self.__dict__.values():
            if isinstance(value, Layer):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Layer):
                        yield item

    def parameters(self):
        for value in self.__dict__.values():
            if isinstance(value, Parameter):
                yield value
        for child in self.children():
            yield from child.parameters()

    def buffers(self):
        """(name, array) pairs of non-learnable state (running statistics)."""
        yield from self._own_buffers()
        for child in self.children():
            yield from child.buffers()

    def _own_buffers(self):
        return ()


class SampledConv(Layer):
    """k x k convolution whose taps come from a cached sampling grid."""

    def __init__(self, name, c_in, c_out, kernel_size, rng, *, stride=1,
                 geometry="sphere", bias=True, dtype=np.float32):
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.geometry = geometry
        fan_in = c_in * self.kernel_size * self.kernel_size
        self.weight = Parameter(
            name + ".weight",
            fan_in_normal(rng, (c_out, c_in, self.kernel_size, self.kernel_size), fan_in, dtype),
        )
        # a batch norm right after the conv absorbs any constant shift,
        # so such convs carry no bias
        self.bias = Parameter(name + ".bias", np.zeros(c_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2], x.shape[-1]
        grid = sphere.build_sampling_grid(h, w, self.kernel_size, self.stride, self.geometry)
        return eng.conv2d_sampled(x, self.weight, self.bias, grid)


class PointwiseConv(Layer):
    """1x1 channel mix."""

    def __init__(self, name, c_in, c_out, rng, *, dtype=np.float32):
        self.weight = Parameter(
            name + ".weight", fan_in_normal(rng, (c_out, c_in), c_in, dtype)
        )
        self.bias = Parameter(name + ".bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return eng.conv1x1(x, self.weight, self.bias)


class Linear(Layer):
    def __init__(self, name, n_in, n_out, rng, *, dtype=np.float32):
        self.weight = Parameter(
            name + ".weight", fan_in_normal(rng, (n_out, n_in), n_in, dtype)
        )
        self.bias = Parameter(name + ".bias", np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return eng.fully_connected(x, self.weight, self.bias)


class Conv3d(Layer):
    def __init__(self, name, c_in, c_out, kernel_size, rng, *, dtype=np.float32):
        k = int(kernel_size)
        fan_in = c_in * k * k * k
        self.weight = Parameter(
            name + ".weight", fan_in_normal(rng, (c_out, c_in, k, k, k), fan_in, dtype)
        )
        self.bias = Parameter(name + ".bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return eng.conv3d(x, self.weight, self.bias)


class BatchNorm(Layer):
    """Channel-wise batch normalization with running inference statistics."""

    def __init__(self, name, channels, *, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.name = name
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = Parameter(name + ".gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(name + ".beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _own_buffers(self):
        yield self.name + ".running_mean", self.running_mean
        yield self.name + ".running_var", self.running_var

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return eng.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            momentum=self.momentum, eps=self.eps, train=train,
        )


class SpatialAttention(Layer):
    """Gate a map by a sigmoid field computed from channel max and mean.

    The 7x7 gating convolution samples on the same geometry as the block
    it serves, so attention stays aligned with the feature taps.
    """

    def __init__(self, name, rng, *, geometry="sphere", dtype=np.float32):
        self.conv = SampledConv(name + ".conv", 2, 1, 7, rng,
                                geometry=geometry, dtype=dtype)

    def __call__(self, f: Tensor) -> Tensor:
        squeeze = f.ndim == 3
        if squeeze:
            f = eng.reshape(f, (1,) + f.shape)
        peak = eng.reduce_max(f, axis=1, keepdims=True)
        level = eng.mean(f, axis=1, keepdims=True)
        gate = eng.sigmoid(self.conv(eng.concat([peak, level], axis=1)))
        out = eng.mul(f, gate)
        if squeeze:
            out = eng.reshape(out, out.shape[1:])
        return out


class ChannelAttention(Layer):
    """Squeeze-and-excitation: GAP, bottleneck MLP, sigmoid channel gate."""

    def __init__(self, name, channels, reduction, rng, *, dtype=np.float32):
        if channels % reduction:
            raise ConfigError(
                f"channel attention needs reduction {reduction} to divide channels {channels}"
            )
        hidden = channels // reduction
        self.reduce = Linear(name + ".reduce", channels, hidden, rng, dtype=dtype)
        self.expand = Linear(name + ".expand", hidden, channels, rng, dtype=dtype)

    def __call__(self, f: Tensor) -> Tensor:
        squeeze = f.ndim == 3
        if squeeze:
            f = eng.reshape(f, (1,) + f.shape)
        pooled = eng.global_average_pool(f)                 # [B, C]
        gate = eng.sigmoid(self.expand(eng.relu(self.reduce(pooled))))
        gate = eng.reshape(gate, gate.shape + (1, 1))
        out = eng.mul(f, gate)
        if squeeze:
            out = eng.reshape(out, out.shape[1:])
        return out


class RspBlock(Layer):
    """Residual block with two sampled convolutions and a spatial gate:

        y = x + gate(relu(bn2(conv2(relu(bn1(conv1(x)))))))

    With zero conv weights and zero bn scale the branch is exactly zero,
    so the block is a bit-exact identity.
    """

    def __init__(self, name, channels, rng, *, geometry="sphere",
                 use_attention=True, dtype=np.float32):
        self.conv1 = SampledConv(name + ".conv1", channels, channels, 3, rng,
                                 geometry=geometry, bias=False, dtype=dtype)
        self.bn1 = BatchNorm(name + ".bn1", channels, dtype=dtype)
        self.conv2 = SampledConv(name + ".conv2", channels, channels, 3, rng,
                                 geometry=geometry, bias=False, dtype=dtype)
        self.bn2 = BatchNorm(name + ".bn2", channels, dtype=dtype)
        self.attention = (
            SpatialAttention(name + ".attention", rng, geometry=geometry, dtype=dtype)
            if use_attention else None
        )

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = eng.reshape(x, (1,) + x.shape)
        h = eng.relu(self.bn1(self.conv1(x), train))
        h = eng.relu(self.bn2(self.conv2(h), train))
        if self.attention is not None:
            h = self.attention(h)
        out = eng.add(x, h)
        if squeeze:
            out = eng.reshape(out, out.shape[1:])
        return out


class RspChain(Layer):
    """n residual blocks applied in sequence."""

    def __init__(self, name, channels, depth, rng, *, geometry="sphere",
                 use_attention=True, dtype=np.float32):
        if depth < 1:
            raise ConfigError(f"residual chain needs depth >= 1, got {depth}")
        self.blocks = [
            RspBlock(f"{name}.block{i}", channels, rng, geometry=geometry,
                     use_attention=use_attention, dtype=dtype)
            for i in range(depth)
        ]

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        for block in self.blocks:
            x = block(x, train)
        return x
