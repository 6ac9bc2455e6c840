"""Parameter-holding building blocks on top of the autodiff primitives.

Modules register Tensor attributes (trainable when requires_grad) and
ndarray attributes (buffers such as running statistics). Mode is passed
per call: forward(x, train).
"""

from __future__ import annotations

import contextlib

import numpy as np

from tailnas.autodiff import functional as F
from tailnas.autodiff.tensor import Tensor

_update_running_stats = True


@contextlib.contextmanager
def frozen_running_stats():
    """Suspend running-stat updates (used by alpha steps and probes)."""
    global _update_running_stats
    prev = _update_running_stats
    _update_running_stats = False
    try:
        yield
    finally:
        _update_running_stats = prev


def kaiming_conv(rng, c_out, c_in_per_group, kh, kw):
    fan_in = c_in_per_group * kh * kw
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in_per_group, kh, kw))


class Module:
    def __init__(self):
        object.__setattr__(self, "_tensors", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        for d in (self._tensors, self._children, self._buffers):
            d.pop(name, None)
        if isinstance(value, Tensor):
            self._tensors[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, np.ndarray):
            self._buffers[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        for d in ("_tensors", "_children", "_buffers"):
            table = object.__getattribute__(self, d)
            if name in table:
                return table[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def named_tensors(self, prefix=""):
        """All Tensor attributes, trainable or frozen, in registration order."""
        for name, t in self._tensors.items():
            yield (prefix + name, t)
        for name, child in self._children.items():
            yield from child.named_tensors(prefix + name + ".")

    def named_parameters(self, prefix=""):
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield (name, t)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, a in self._buffers.items():
            yield (prefix + name, a)
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def param_count(self):
        """Trainable scalars only; frozen tensors (e.g. a fixed classifier) count 0."""
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_arrays(self):
        """name -> array for every tensor and buffer (for npz dumps)."""
        out = {name: t.data for name, t in self.named_tensors()}
        for name, a in self.named_buffers():
            out["buffer:" + name] = a
        return out

    def load_state_arrays(self, arrays):
        tensors = dict(self.named_tensors())
        buffers = dict(self.named_buffers())
        for name, value in arrays.items():
            if name.startswith("buffer:"):
                buffers[name[len("buffer:"):]][...] = value
            else:
                tensors[name].data[...] = value

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._order = []
        for m in mods:
            self.append(m)

    def append(self, mod):
        key = str(len(self._order))
        self._children[key] = mod
        self._order.append(key)

    def __iter__(self):
        return (self._children[k] for k in self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._children[self._order[i]]


class Sequential(Module):
    def __init__(self, *mods):
        super().__init__()
        self.mods = ModuleList(mods)

    def forward(self, x, train):
        for m in self.mods:
            x = m(x, train)
        return x


class Identity(Module):
    def forward(self, x, train):
        return x


class ReLU(Module):
    def forward(self, x, train):
        return F.relu(x)


class Sigmoid(Module):
    def forward(self, x, train):
        return F.sigmoid(x)


class GELU(Module):
    def forward(self, x, train):
        return F.gelu(x)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, dilation=1, groups=1, *, rng):
        super().__init__()
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.weight = Tensor(kaiming_conv(rng, c_out, c_in // groups, kernel, kernel), requires_grad=True)

    def forward(self, x, train):
        return F.conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def forward(self, x, train):
        return F.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=train, momentum=self.momentum, eps=self.eps,
            update_running=_update_running_stats,
        )


class GroupNorm(Module):
    def __init__(self, c, groups):
        super().__init__()
        self.groups = groups
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True)

    def forward(self, x, train):
        return F.groupnorm(x, self.gamma, self.beta, self.groups)


class Linear(Module):
    """y = x @ weight + bias with weight (d_in, d_out); class j is column j."""

    def __init__(self, d_in, d_out, bias=True, *, rng):
        super().__init__()
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x, train):
        y = F.matmul(x, self.weight)
        if self.bias is not None:
            y = F.broadcast_add(y, self.bias)
        return y


class MaxPool2d(Module):
    def __init__(self, kernel=3, stride=1, padding=1):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, train):
        return F.max_pool2d(x, self.kernel, self.stride, self.padding)


class AvgPool2d(Module):
    def __init__(self, kernel=3, stride=1, padding=1):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding

    def forward(self, x, train):
        return F.avg_pool2d(x, self.kernel, self.stride, self.padding)


class GlobalAvgPool(Module):
    def forward(self, x, train):
        return F.global_avg_pool(x)


class ReLUConvBN(Module):
    """relu -> conv -> bn, the standard cell preprocessing block."""

    def __init__(self, c_in, c_out, kernel=1, stride=1, padding=0, *, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, stride, padding, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x, train):
        return self.bn(self.conv(F.relu(x), train), train)


class FactorizedReduce(Module):
    """Halve spatial size without information loss: two offset 1x1 stride-2 convs."""

    def __init__(self, c_in, c_out, *, rng):
        super().__init__()
        c1 = c_out // 2
        self.conv1 = Conv2d(c_in, c1, 1, stride=2, rng=rng)
        self.conv2 = Conv2d(c_in, c_out - c1, 1, stride=2, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x, train):
        x = F.relu(x)
        a = self.conv1(x, train)
        # offset the second path by one pixel; pad keeps odd sizes consistent
        shifted = Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, 1), (0, 1)))[:, :, 1:, 1:])
        shifted.requires_grad = x.requires_grad
        if x.requires_grad:
            from tailnas.autodiff.tensor import accumulate, record

            def bwd(gy, src=x):
                g = np.pad(gy, ((0, 0), (0, 0), (1, 0), (1, 0)))[:, :, :-1, :-1]
                accumulate(src, g)

            record(shifted, bwd)
        b = self.conv2(shifted, train)
        return self.bn(F.concat([a, b], axis=1), train)


class SEBlock(Module):
    """Squeeze-and-excitation channel gate (exploration harness only)."""

    def __init__(self, c, reduction=8, *, rng):
        super().__init__()
        mid = max(1, c // reduction)
        self.fc1 = Linear(c, mid, rng=rng)
        self.fc2 = Linear(mid, c, rng=rng)

    def forward(self, x, train):
        s = F.global_avg_pool(x)
        s = F.sigmoid(self.fc2(F.relu(self.fc1(s, train)), train))
        return F.channel_scale(x, s)
