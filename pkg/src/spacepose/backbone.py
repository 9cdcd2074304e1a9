"""Fully convolutional RGBT feature extractor.

A strided stem followed by stages of (stride-2 downsampling conv, then a
3x3 / 1x1 / 3x3 expansion-contraction triplet wrapped in a residual skip).
Every conv is followed by batch norm and a leaky ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spacepose.diff import ops
from spacepose.diff.node import Node
from spacepose.errors import ConfigError
from spacepose.nn import Module, he_normal


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 4
    widths: tuple[int, ...] = (16, 32, 64, 128, 256)
    first_kernel: int = 3
    dropout: float = 0.2

    def __post_init__(self):
        if len(self.widths) < 1 or any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ConfigError("backbone widths must be strictly increasing")
        if any(w % 2 for w in self.widths[1:]):
            raise ConfigError("stage widths must be even for the 1x1 contraction")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.first_kernel % 2 == 0:
            raise ConfigError("first kernel size must be odd")
        if self.in_channels < 1:
            raise ConfigError("need at least one input channel")

    @property
    def reductions(self) -> int:
        return len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


@dataclass
class FeatureMap:
    tensor: Node     # [N, C, h, w]
    pooled: Node     # [N, C]


class ConvBlock(Module):
    """conv (no bias) -> batch norm -> leaky ReLU."""

    def __init__(self, cin: int, cout: int, k: int, stride: int, rng, dtype):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        self.weight = self.param("weight", he_normal(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.gamma = self.param("bn_gamma", np.ones(cout, dtype=dtype))
        self.beta = self.param("bn_beta", np.zeros(cout, dtype=dtype))
        self.stats = ops.RunningStats(cout, dtype)
        self.buffer("bn_mean", self.stats.mean)
        self.buffer("bn_var", self.stats.var)

    def __call__(self, x: Node, train: bool) -> Node:
        y = ops.conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        return ops.leaky_relu(ops.batch_norm(y, self.gamma, self.beta, self.stats, train))


class Stage(Module):
    def __init__(self, cin: int, cout: int, rng, dtype):
        super().__init__()
        self.down = self.child("down", ConvBlock(cin, cout, 3, 2, rng.child(0), dtype))
        self.expand = self.child("expand", ConvBlock(cout, cout, 3, 1, rng.child(1), dtype))
        self.squeeze = self.child("squeeze", ConvBlock(cout, cout // 2, 1, 1, rng.child(2), dtype))
        self.restore = self.child("restore", ConvBlock(cout // 2, cout, 3, 1, rng.child(3), dtype))

    def __call__(self, x: Node, train: bool) -> Node:
        d = self.down(x, train)
        return d + self.restore(self.squeeze(self.expand(d, train), train), train)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.stem = self.child("stem", ConvBlock(cfg.in_channels, cfg.widths[0], cfg.first_kernel, 2,
                                                 rng.child(0), dtype))
        self.stages = []
        for i, (a, b) in enumerate(zip(cfg.widths, cfg.widths[1:])):
            self.stages.append(self.child(f"stage{i}", Stage(a, b, rng.child(i + 1), dtype)))

    def __call__(self, images, train: bool, rng=None, dropout: float | None = None,
                 batch_stats: bool | None = None) -> FeatureMap:
        return backbone_forward(self, images, train, rng, dropout, batch_stats)


def build_backbone(cfg: BackboneConfig, rng, dtype=np.float32) -> Backbone:
    return Backbone(cfg, rng, dtype)


def backbone_forward(module: Backbone, images, train: bool, rng=None, dropout: float | None = None,
                     batch_stats: bool | None = None) -> FeatureMap:
    """Run the trunk; ``train`` enables batch statistics and dropout (which needs ``rng``).

    ``dropout`` overrides the configured probability for this call. ``batch_stats=False``
    keeps batch norm on its running statistics (and leaves them untouched) in train mode.
    """
    p = module.cfg.dropout if dropout is None else dropout
    x = images if isinstance(images, Node) else Node(np.asarray(images))
    if x.ndim != 4 or x.shape[1] != module.cfg.in_channels:
        raise ConfigError(f"expected [N, {module.cfg.in_channels}, H, W] input, got {x.shape}")
    need = 2 ** module.cfg.reductions
    if x.shape[2] < need or x.shape[3] < need:
        raise ConfigError(f"input {x.shape[2]}x{x.shape[3]} smaller than the {need} px minimum")
    bn_train = train if batch_stats is None else batch_stats
    x = module.stem(x, bn_train)
    for stage in module.stages:
        x = stage(x, bn_train)
    if train and p > 0:
        if rng is None:
            raise ConfigError("train-mode dropout needs an rng")
        x = x * rng.dropout_mask(p, x.shape, dtype=x.dtype.type)
    return FeatureMap(x, ops.mean(x, axis=(2, 3)))
