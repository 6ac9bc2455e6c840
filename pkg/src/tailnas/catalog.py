"""The candidate-operation catalog for cell search.

Ten operations in a fixed, documented order. The two long-tail-oriented
bottleneck convolutions are:

  lt_agg_conv  -- pre-activated bottleneck whose 3x3 stage is a grouped
                  (multi-path) convolution; residual when shapes permit.
  lt_hier_conv -- post-activated bottleneck whose 3x3 stage splits the
                  channels into s groups and cascades them, each group's
                  conv seeing the previous group's output; residual when
                  shapes permit.

Channel clamping keeps both viable at desk scale: the path count G is
min(32, mid) and the hierarchy scale s is min(8, mid), with mid rounded
down to a multiple of the chosen value.
"""

from __future__ import annotations

import numpy as np

from tailnas.autodiff import functional as F
from tailnas.errors import ShapeError, StructureError
from tailnas.kernels import conv_out_size
from tailnas.layers import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    FactorizedReduce,
    Identity,
    MaxPool2d,
    Module,
    ModuleList,
)

CATALOG_ORDER = (
    "zero",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "lt_agg_conv",
    "lt_hier_conv",
)

# Table-1 style baseline set: the catalog without the two new operations.
VANILLA_CATALOG = CATALOG_ORDER[:8]

AGG_MAX_PATHS = 32
HIER_MAX_SCALE = 8


def catalog_index(kind):
    return CATALOG_ORDER.index(kind)


class OpInstance(Module):
    """Base class for catalog operations; subclasses fill `structure`."""

    def __init__(self, kind, c_in, c_out, stride):
        super().__init__()
        self.kind = kind
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.structure = {}
        self.activation_style = None

    def layer_sequence(self):
        """Ordered list of {'type': ..., ...} dicts describing the op."""
        return []

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.kind} expects (N,{self.c_in},H,W), got {x.shape}")
        if self.spatial_kernel() > 1 and min(x.shape[2], x.shape[3]) < 3:
            raise ShapeError(f"{self.kind} needs spatial size >= 3, got {x.shape}")

    def spatial_kernel(self):
        return 3

    def out_spatial(self, h, w):
        return (conv_out_size(h, 3, self.stride, 1, 1), conv_out_size(w, 3, self.stride, 1, 1))


class ZeroOp(OpInstance):
    def __init__(self, c_in, c_out, stride):
        super().__init__("zero", c_in, c_out, stride)

    def spatial_kernel(self):
        return 1

    def forward(self, x, train):
        self.check_input(x)
        n, _, h, w = x.shape
        ho, wo = self.out_spatial(h, w)
        from tailnas.autodiff.tensor import Tensor

        return Tensor(np.zeros((n, self.c_out, ho, wo)))

    def layer_sequence(self):
        return [{"type": "zero"}]


class SkipConnect(OpInstance):
    def __init__(self, c_in, c_out, stride, rng):
        super().__init__("skip_connect", c_in, c_out, stride)
        if stride == 1:
            if c_in != c_out:
                raise StructureError(f"skip_connect at stride 1 needs c_in == c_out, got {c_in}->{c_out}")
            self.inner = Identity()
        else:
            self.inner = FactorizedReduce(c_in, c_out, rng=rng)

    def spatial_kernel(self):
        return 1

    def forward(self, x, train):
        self.check_input(x)
        return self.inner(x, train)

    def layer_sequence(self):
        if self.stride == 1:
            return [{"type": "identity"}]
        return [{"type": "factorized_reduce", "in": self.c_in, "out": self.c_out}]


class PoolOp(OpInstance):
    def __init__(self, kind, c_in, c_out, stride):
        super().__init__(kind, c_in, c_out, stride)
        if c_in != c_out:
            raise StructureError(f"{kind} cannot change channels ({c_in}->{c_out})")
        pool = MaxPool2d if kind == "max_pool_3x3" else AvgPool2d
        self.pool = pool(3, stride, 1)

    def forward(self, x, train):
        self.check_input(x)
        return self.pool(x, train)

    def layer_sequence(self):
        return [{"type": self.kind, "kernel": 3, "stride": self.stride}]


class SepConv(OpInstance):
    """Depthwise-separable conv applied twice (relu-dwconv-pwconv-bn each round)."""

    def __init__(self, kind, c_in, c_out, stride, kernel, rng):
        super().__init__(kind, c_in, c_out, stride)
        pad = (kernel - 1) // 2
        self.kernel = kernel
        self.dw1 = Conv2d(c_in, c_in, kernel, stride, pad, groups=c_in, rng=rng)
        self.pw1 = Conv2d(c_in, c_in, 1, rng=rng)
        self.bn1 = BatchNorm2d(c_in)
        self.dw2 = Conv2d(c_in, c_in, kernel, 1, pad, groups=c_in, rng=rng)
        self.pw2 = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn2 = BatchNorm2d(c_out)

    def spatial_kernel(self):
        return self.kernel

    def forward(self, x, train):
        self.check_input(x)
        y = self.bn1(self.pw1(self.dw1(F.relu(x), train), train), train)
        y = self.bn2(self.pw2(self.dw2(F.relu(y), train), train), train)
        return y

    def layer_sequence(self):
        k = self.kernel
        seq = []
        for rnd, (ci, co, s) in enumerate([(self.c_in, self.c_in, self.stride), (self.c_in, self.c_out, 1)]):
            seq += [
                {"type": "relu"},
                {"type": "conv", "kernel": k, "in": ci, "out": ci, "groups": ci, "stride": s},
                {"type": "conv", "kernel": 1, "in": ci, "out": co, "groups": 1, "stride": 1},
                {"type": "batchnorm", "channels": co},
            ]
        return seq


class DilConv(OpInstance):
    """relu -> dilated depthwise conv -> pointwise conv -> bn (dilation 2)."""

    def __init__(self, kind, c_in, c_out, stride, kernel, rng):
        super().__init__(kind, c_in, c_out, stride)
        pad = kernel - 1  # dilation 2 same-padding
        self.kernel = kernel
        self.dw = Conv2d(c_in, c_in, kernel, stride, pad, dilation=2, groups=c_in, rng=rng)
        self.pw = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def spatial_kernel(self):
        return self.kernel

    def forward(self, x, train):
        self.check_input(x)
        return self.bn(self.pw(self.dw(F.relu(x), train), train), train)

    def layer_sequence(self):
        return [
            {"type": "relu"},
            {"type": "conv", "kernel": self.kernel, "in": self.c_in, "out": self.c_in,
             "groups": self.c_in, "dilation": 2, "stride": self.stride},
            {"type": "conv", "kernel": 1, "in": self.c_in, "out": self.c_out, "groups": 1, "stride": 1},
            {"type": "batchnorm", "channels": self.c_out},
        ]


def _bottleneck_mid(c_out, cap):
    mid = c_out // 2
    if mid < 1:
        raise StructureError(f"bottleneck needs c_out >= 2, got {c_out}")
    width = min(cap, mid)
    return (mid // width) * width, width


class AggConv(OpInstance):
    """Pre-activated bottleneck with a multi-path grouped 3x3 stage."""

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__("lt_agg_conv", c_in, c_out, stride)
        mid, paths = _bottleneck_mid(c_out, AGG_MAX_PATHS)
        self.structure = {"mid_channels": mid, "groups": paths}
        self.activation_style = "pre"
        self.residual = c_in == c_out and stride == 1
        self.bn1 = BatchNorm2d(c_in)
        self.reduce = Conv2d(c_in, mid, 1, rng=rng)
        self.bn2 = BatchNorm2d(mid)
        self.grouped = Conv2d(mid, mid, 3, stride, 1, groups=paths, rng=rng)
        self.bn3 = BatchNorm2d(mid)
        self.expand = Conv2d(mid, c_out, 1, rng=rng)

    def forward(self, x, train):
        self.check_input(x)
        y = self.reduce(F.relu(self.bn1(x, train)), train)
        y = self.grouped(F.relu(self.bn2(y, train)), train)
        y = self.expand(F.relu(self.bn3(y, train)), train)
        if self.residual:
            y = F.add(y, x)
        return y

    def layer_sequence(self):
        mid, g = self.structure["mid_channels"], self.structure["groups"]
        seq = [
            {"type": "batchnorm", "channels": self.c_in},
            {"type": "relu"},
            {"type": "conv", "kernel": 1, "in": self.c_in, "out": mid, "groups": 1, "stride": 1},
            {"type": "batchnorm", "channels": mid},
            {"type": "relu"},
            {"type": "conv", "kernel": 3, "in": mid, "out": mid, "groups": g, "stride": self.stride},
            {"type": "batchnorm", "channels": mid},
            {"type": "relu"},
            {"type": "conv", "kernel": 1, "in": mid, "out": self.c_out, "groups": 1, "stride": 1},
        ]
        if self.residual:
            seq.append({"type": "residual_add"})
        return seq


class HierConv(OpInstance):
    """Post-activated bottleneck with a cascaded split-and-reuse 3x3 stage.

    The entry 1x1 conv carries the stride so the cascade (including the
    unconvolved first split) runs at one resolution. scale == 1 degenerates
    to a plain bottleneck (single full-width 3x3).
    """

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__("lt_hier_conv", c_in, c_out, stride)
        mid, scale = _bottleneck_mid(c_out, HIER_MAX_SCALE)
        self.structure = {"mid_channels": mid, "scale": scale}
        self.activation_style = "post"
        self.residual = c_in == c_out and stride == 1
        self.scale = scale
        self.width = mid // scale
        self.entry = Conv2d(c_in, mid, 1, stride=stride, rng=rng)
        self.bn_entry = BatchNorm2d(mid)
        n_convs = 1 if scale == 1 else scale - 1
        self.convs = ModuleList([Conv2d(self.width, self.width, 3, 1, 1, rng=rng) for _ in range(n_convs)])
        self.bns = ModuleList([BatchNorm2d(self.width) for _ in range(n_convs)])
        self.exit = Conv2d(mid, c_out, 1, rng=rng)
        self.bn_exit = BatchNorm2d(c_out)

    def forward(self, x, train):
        self.check_input(x)
        y = F.relu(self.bn_entry(self.entry(x, train), train))
        if self.scale == 1:
            y = F.relu(self.bns[0](self.convs[0](y, train), train))
        else:
            groups = F.split(y, [self.width] * self.scale, axis=1)
            outs = [groups[0]]
            prev = groups[0]
            for i in range(1, self.scale):
                fed = F.add(groups[i], prev)
                prev = F.relu(self.bns[i - 1](self.convs[i - 1](fed, train), train))
                outs.append(prev)
            y = F.concat(outs, axis=1)
        y = F.relu(self.bn_exit(self.exit(y, train), train))
        if self.residual:
            y = F.add(y, x)
        return y

    def layer_sequence(self):
        mid, s = self.structure["mid_channels"], self.structure["scale"]
        seq = [
            {"type": "conv", "kernel": 1, "in": self.c_in, "out": mid, "groups": 1, "stride": self.stride},
            {"type": "batchnorm", "channels": mid},
            {"type": "relu"},
        ]
        if s == 1:
            seq += [
                {"type": "conv", "kernel": 3, "in": mid, "out": mid, "groups": 1, "stride": 1},
                {"type": "batchnorm", "channels": mid},
                {"type": "relu"},
            ]
        else:
            seq.append({"type": "split", "sections": s, "width": self.width})
            for i in range(1, s):
                seq += [
                    {"type": "hier_add", "group": i},
                    {"type": "conv", "kernel": 3, "in": self.width, "out": self.width, "groups": 1, "stride": 1},
                    {"type": "batchnorm", "channels": self.width},
                    {"type": "relu"},
                ]
            seq.append({"type": "concat", "sections": s})
        seq += [
            {"type": "conv", "kernel": 1, "in": mid, "out": self.c_out, "groups": 1, "stride": 1},
            {"type": "batchnorm", "channels": self.c_out},
            {"type": "relu"},
        ]
        if self.residual:
            seq.append({"type": "residual_add"})
        return seq


def build_op(kind, c_in, c_out, stride, seed):
    """Construct one catalog operation with seeded parameter init."""
    if kind not in CATALOG_ORDER:
        raise StructureError(f"unknown op kind {kind!r}; catalog: {CATALOG_ORDER}")
    if c_in < 1 or c_out < 1:
        raise StructureError(f"channel counts must be positive, got {c_in}->{c_out}")
    if stride not in (1, 2):
        raise StructureError(f"stride must be 1 or 2, got {stride}")
    rng = np.random.default_rng(seed)
    if kind == "zero":
        return ZeroOp(c_in, c_out, stride)
    if kind == "skip_connect":
        return SkipConnect(c_in, c_out, stride, rng)
    if kind in ("max_pool_3x3", "avg_pool_3x3"):
        return PoolOp(kind, c_in, c_out, stride)
    if kind == "sep_conv_3x3":
        return SepConv(kind, c_in, c_out, stride, 3, rng)
    if kind == "sep_conv_5x5":
        return SepConv(kind, c_in, c_out, stride, 5, rng)
    if kind == "dil_conv_3x3":
        return DilConv(kind, c_in, c_out, stride, 3, rng)
    if kind == "dil_conv_5x5":
        return DilConv(kind, c_in, c_out, stride, 5, rng)
    if kind == "lt_agg_conv":
        return AggConv(c_in, c_out, stride, rng)
    return HierConv(c_in, c_out, stride, rng)


def apply_op(op, x, mode="train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    return op(x, mode == "train")


def describe_structure(op):
    """JSON-ready structural report: layer sequence plus parameter count."""
    return {
        "kind": op.kind,
        "c_in": op.c_in,
        "c_out": op.c_out,
        "stride": op.stride,
        "structure": dict(op.structure),
        "activation_style": op.activation_style,
        "layers": op.layer_sequence(),
        "param_count": op.param_count(),
    }
