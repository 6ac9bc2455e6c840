"""Configurable residual blocks for the component-exploration harness.

These blocks exist so single architectural properties (topology,
convolution design, activation kind and placement, normalization) can be
varied one at a time on a fixed small stack. The SE gate and the
sigmoid/GELU/groupnorm/layernorm variants live here only; the search
catalog never uses them.
"""

from __future__ import annotations

import numpy as np

from tailnas.autodiff import functional as F
from tailnas.errors import StructureError
from tailnas.layers import (
    BatchNorm2d,
    Conv2d,
    GELU,
    GroupNorm,
    Identity,
    Module,
    ModuleList,
    ReLU,
    SEBlock,
    Sigmoid,
)

TOPOLOGIES = ("basic", "bottleneck")
CONV_KINDS = ("plain", "aggregated", "hierarchical", "se")
ACTIVATIONS = ("relu", "sigmoid", "gelu")
PLACEMENTS = ("pre", "post")
NORMS = ("batchnorm", "groupnorm", "layernorm", "none")


def make_activation(kind):
    if kind == "relu":
        return ReLU()
    if kind == "sigmoid":
        return Sigmoid()
    if kind == "gelu":
        return GELU()
    raise StructureError(f"unknown activation {kind!r}")


def make_norm(kind, c):
    if kind == "batchnorm":
        return BatchNorm2d(c)
    if kind == "groupnorm":
        return GroupNorm(c, groups=min(8, c))
    if kind == "layernorm":
        return GroupNorm(c, groups=1)
    if kind == "none":
        return Identity()
    raise StructureError(f"unknown normalization {kind!r}")


class _ConvUnit(Module):
    """One conv with its norm and activation, in pre or post placement."""

    def __init__(self, c_in, c_out, kernel, stride, groups, act, norm, placement, rng):
        super().__init__()
        pad = (kernel - 1) // 2
        self.placement = placement
        self.conv = Conv2d(c_in, c_out, kernel, stride, pad, groups=groups, rng=rng)
        self.norm = make_norm(norm, c_in if placement == "pre" else c_out)
        self.act = make_activation(act)

    def forward(self, x, train):
        if self.placement == "pre":
            return self.conv(self.act(self.norm(x, train), train), train)
        return self.act(self.norm(self.conv(x, train), train), train)


class _HierUnit(Module):
    """Split-and-cascade 3x3 stage at fixed width (exploration variant)."""

    def __init__(self, c, scale, act, norm, placement, rng):
        super().__init__()
        if c % scale:
            raise StructureError(f"hierarchical scale {scale} must divide {c} channels")
        self.scale = scale
        self.width = c // scale
        self.units = ModuleList([
            _ConvUnit(self.width, self.width, 3, 1, 1, act, norm, placement, rng)
            for _ in range(max(1, scale - 1))
        ])

    def forward(self, x, train):
        if self.scale == 1:
            return self.units[0](x, train)
        groups = F.split(x, [self.width] * self.scale, axis=1)
        outs = [groups[0]]
        prev = groups[0]
        for i in range(1, self.scale):
            prev = self.units[i - 1](F.add(groups[i], prev), train)
            outs.append(prev)
        return F.concat(outs, axis=1)


class ExploreBlock(Module):
    """Residual block with one architectural axis varied at a time."""

    def __init__(self, c, topology="bottleneck", conv_kind="plain", act="relu",
                 norm="batchnorm", placement="post", *, rng):
        super().__init__()
        if topology not in TOPOLOGIES:
            raise StructureError(f"unknown topology {topology!r}")
        if conv_kind not in CONV_KINDS:
            raise StructureError(f"unknown conv kind {conv_kind!r}")
        self.se = None
        unit = lambda ci, co, k, groups=1: _ConvUnit(ci, co, k, 1, groups, act, norm, placement, rng)
        if topology == "basic":
            mid = c
            stages = [unit(c, c, 3), self._transform(conv_kind, c, act, norm, placement, rng)]
        else:
            mid = max(2, c // 2)
            stages = [
                unit(c, mid, 1),
                self._transform(conv_kind, mid, act, norm, placement, rng),
                unit(mid, c, 1),
            ]
        self.stages = ModuleList(stages)
        if conv_kind == "se":
            self.se = SEBlock(c, reduction=8, rng=rng)

    def _transform(self, conv_kind, c, act, norm, placement, rng):
        if conv_kind in ("plain", "se"):
            return _ConvUnit(c, c, 3, 1, 1, act, norm, placement, rng)
        if conv_kind == "aggregated":
            return _ConvUnit(c, c, 3, 1, min(8, c), act, norm, placement, rng)
        return _HierUnit(c, min(4, c), act, norm, placement, rng)

    def forward(self, x, train):
        y = x
        for stage in self.stages:
            y = stage(y, train)
        if self.se is not None:
            y = self.se(y, train)
        return F.add(y, x)


class ExploreNet(Module):
    """stem -> block -> strided downsample -> block -> pooled linear head."""

    def __init__(self, image_channels, n_classes, width=16, seed=0, **block_kw):
        super().__init__()
        from tailnas.layers import GlobalAvgPool, Linear, ReLUConvBN

        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE14]))
        self.stem = _ConvUnit(image_channels, width, 3, 1, 1, "relu", "batchnorm", "post", rng)
        self.block1 = ExploreBlock(width, rng=rng, **block_kw)
        self.down = ReLUConvBN(width, width * 2, kernel=1, stride=2, rng=rng)
        self.block2 = ExploreBlock(width * 2, rng=rng, **block_kw)
        self.pool = GlobalAvgPool()
        self.head = Linear(width * 2, n_classes, rng=rng)

    def forward(self, x, train):
        y = self.stem(x, train)
        y = self.block1(y, train)
        y = self.down(y, train)
        y = self.block2(y, train)
        return self.head(self.pool(y, train), train)
