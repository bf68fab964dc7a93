"""Residual units and the residual attention module.

Parameters live on small module objects; ``named_parameters`` walks them in
attribute order, which gives stable names for checkpoints and the census.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor, gated


class Module:
    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Module, Tensor, ops.BatchNormState)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, list, tuple)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            yield from _walk(value, prefix + key, params=True)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            yield from _walk(value, prefix + key, params=False)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _walk(value, name: str, params: bool):
    if isinstance(value, Tensor):
        if params and value.requires_grad:
            value.name = name
            yield name, value
    elif isinstance(value, ops.BatchNormState):
        if not params:
            yield name + ".running_mean", value.running_mean
            yield name + ".running_var", value.running_var
    elif isinstance(value, Module):
        method = value.named_parameters if params else value.named_buffers
        yield from method(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}", params)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in), requires_grad=True)


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, bias: bool = False):
        self.stride = stride
        self.pad = pad
        self.weight = he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = ops.BatchNormState(channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.state, mode)


class ResidualUnit(Module):
    """1x1 conv, 3x3 conv (carrying the stride), each batch-normed, plus a skip.

    The skip is the identity unless the unit changes resolution or width, in
    which case it is a strided 1x1 projection followed by batch norm.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1):
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.conv1 = Conv(c_in, c_out, 1, rng)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv(c_out, c_out, 3, rng, stride=stride, pad=1)
        self.bn2 = BatchNorm(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv(c_in, c_out, 1, rng, stride=stride)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"residual unit expects {self.c_in} input channels, got shape {x.shape}")
        h = ops.relu(self.bn1(self.conv1(x), mode))
        h = self.bn2(self.conv2(h), mode)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), mode)
        return ops.relu(h + skip)


def residual_unit(x: Tensor, unit: ResidualUnit, mode: str = "train") -> Tensor:
    return unit(x, mode)


def pooled_size(size: int) -> int:
    """Spatial size after a 3x3, stride 2, pad 1 pooling (or strided conv)."""
    return (size - 1) // 2 + 1


def mask_depth(spatial: int, max_depth: int = 3) -> int:
    """Number of max-pools in the soft mask, keeping the coarsest level at >= 2."""
    if spatial < 2:
        return 0
    return max(0, min(max_depth, int(math.floor(math.log2(spatial))) - 1))


class SoftMask(Module):
    """Bottom-up top-down mask producing per-element weights in (0, 1).

    ``depth`` max-pools go down, each followed by a residual unit; levels 1
    and 2 (2x and 4x reduction) feed a skip unit whose output is added back
    after the upsample that returns to that level.  Two 1x1 convolutions and a
    sigmoid finish the branch.
    """

    def __init__(self, channels: int, spatial: int, rng: np.random.Generator, depth: Optional[int] = None):
        self.channels = channels
        self.spatial = spatial
        self.depth = mask_depth(spatial) if depth is None else depth
        if spatial < 2 ** self.depth:
            raise ShapeError(f"soft mask depth {self.depth} needs spatial size >= {2 ** self.depth}, got {spatial}")
        self.down = [ResidualUnit(channels, channels, rng) for _ in range(self.depth)]
        self.skip_levels = [lvl for lvl in (1, 2) if lvl < self.depth]
        self.skips = [ResidualUnit(channels, channels, rng) for _ in self.skip_levels]
        self.out_conv1 = Conv(channels, channels, 1, rng)
        self.out_bn = BatchNorm(channels)
        self.out_conv2 = Conv(channels, channels, 1, rng, bias=True)

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.shape[2] < 2 ** self.depth or x.shape[3] < 2 ** self.depth:
            raise ShapeError(f"soft mask of depth {self.depth} cannot take spatial size {x.shape[2:]}")
        sizes = [x.shape[2:]]
        skip_out = {}
        h = x
        for lvl in range(1, self.depth + 1):
            h = ops.maxpool2d(h, 3, 2, 1)
            h = self.down[lvl - 1](h, mode)
            sizes.append(h.shape[2:])
            if lvl in self.skip_levels:
                skip_out[lvl] = self.skips[self.skip_levels.index(lvl)](h, mode)
        for lvl in range(self.depth, 0, -1):
            target = sizes[lvl - 1]
            h = ops.bilinear_upsample(h, target[0], target[1])
            if lvl - 1 in skip_out:
                h = h + skip_out[lvl - 1]
        h = ops.relu(self.out_bn(self.out_conv1(h), mode))
        return ops.sigmoid(self.out_conv2(h))


def soft_mask(x: Tensor, mask: SoftMask, mode: str = "train") -> Tensor:
    return mask(x, mode)


class AttentionModule(Module):
    """pre unit -> (1 + mask) * trunk -> post unit."""

    def __init__(self, channels: int, spatial: int, rng: np.random.Generator):
        self.pre = ResidualUnit(channels, channels, rng)
        self.trunk = [ResidualUnit(channels, channels, rng) for _ in range(2)]
        self.mask = SoftMask(channels, spatial, rng)
        self.post = ResidualUnit(channels, channels, rng)

    def trunk_output(self, x: Tensor, mode: str) -> Tensor:
        for unit in self.trunk:
            x = unit(x, mode)
        return x

    def __call__(self, x: Tensor, mode: str = "train", use_mask: bool = True) -> Tensor:
        x = self.pre(x, mode)
        t = self.trunk_output(x, mode)
        if use_mask:
            t = gated(self.mask(x, mode), t)
        return self.post(t, mode)


def attention_module(x: Tensor, module: AttentionModule, mode: str = "train", use_mask: bool = True) -> Tensor:
    return module(x, mode, use_mask)
